#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hkecg/errors.hpp"
#include "hkecg/tensor.hpp"

namespace hkecg {

/// Record-level rhythm, in scoring-matrix row order.
enum class Rhythm { non_af = 0, persistent = 1, paf = 2 };

std::string to_string(Rhythm r);
Rhythm parse_rhythm(const std::string& s);

using Mask = std::vector<std::uint8_t>;

struct EcgRecord {
	std::string id;
	std::string patient;
	double fs = 0.0;
	std::vector<std::string> leads;
	Tensor<float> signal; // leads x T
	Mask af_mask;         // empty when not annotated
	std::vector<Index> r_peaks;
	std::optional<Rhythm> rhythm;
	std::vector<std::string> class_labels;

	Index lead_count() const { return signal.dim(0); }
	Index length() const { return signal.dim(1); }
	bool has_mask() const { return !af_mask.empty(); }

	/// Throws DataError naming the record when an invariant is broken.
	void validate() const;

	bool operator==(const EcgRecord&) const = default;
};

struct Dataset {
	std::string name;
	double fs = 0.0;
	std::vector<std::string> leads;
	std::vector<EcgRecord> records;

	bool operator==(const Dataset&) const = default;
};

struct Segment {
	std::string parent;
	Index start = 0;
	Tensor<float> signal;
	Mask af_mask;
	std::vector<Index> r_peaks;
};

// ---------------------------------------------------------------------------
// Filtering

/// Second-order sections {b0, b1, b2, a0, a1, a2} with a0 == 1.
using SosSection = std::array<double, 6>;
using Sos = std::vector<SosSection>;

/// Digital Butterworth band-pass of the given prototype order (2·order poles).
Sos butter_bandpass(int order, double low, double high, double fs);

/// Complex frequency response magnitude at `freq` Hz.
double sos_gain(const Sos& sos, double freq, double fs);

/// Causal cascade filtering with per-section state {z0, z1}, updated in place.
void sosfilt(const Sos& sos, std::span<double> x, std::span<std::array<double, 2>> state);

/// Steady-state initial conditions for a unit step input.
std::vector<std::array<double, 2>> sosfilt_zi(const Sos& sos);

/// Forward-backward filtering with odd extension at both ends.
std::vector<double> sosfiltfilt(const Sos& sos, std::span<const double> x);

/// Zero-phase band-pass of every lead. Throws ConfigError when fs <= 2·high.
Tensor<float> bandpass(const Tensor<float>& signal, double fs, double low = 0.5, double high = 45.0, int order = 3);

// ---------------------------------------------------------------------------
// Preprocessing

struct ZScored {
	Tensor<float> signal;
	std::vector<bool> flat; // per lead: zero variance, output zeroed
};

/// Per-lead standardisation with population standard deviation.
ZScored zscore(const Tensor<float>& signal);

struct Segmentation {
	std::vector<Segment> segments;
	bool too_short = false;
};

Segment slice(const EcgRecord& rec, Index start, Index length);

/// Windows of win_s seconds every hop_s seconds from sample 0; the tail shorter than a window is dropped.
Segmentation segment(const EcgRecord& rec, double win_s = 30.0, double hop_s = 15.0);

/// Window of `seconds` starting at floor((T - L) / 2). Throws DataError when too short.
Segment center_crop(const EcgRecord& rec, double seconds = 10.0);

Rhythm derive_rhythm(std::span<const std::uint8_t> mask);

/// Appends zero channels up to n. Throws UsageError when n is below the channel count.
Tensor<float> pad_channels(const Tensor<float>& x, Index n);

/// Band-pass then z-score, as applied before detection segmentation.
EcgRecord preprocess_detection(const EcgRecord& rec);

/// Z-score only, as applied before classification crops.
EcgRecord preprocess_classification(const EcgRecord& rec);

std::vector<std::pair<Index, Index>> mask_intervals(std::span<const std::uint8_t> mask);
Mask intervals_mask(const std::vector<std::pair<Index, Index>>& intervals, Index length);

// ---------------------------------------------------------------------------
// Synthetic ECG

struct SynthSpec {
	double fs = 200.0;
	double duration_s = 30.0;
	Index leads = 2;
	Index records_per_patient = 1;
	Index non_af = 4;
	Index paf = 3;
	Index persistent = 3;
	std::string name = "synthetic";

	bool operator==(const SynthSpec&) const = default;
};

SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthSpec& spec);

/**
 * Deterministic synthetic dataset. Sinus stretches use a P-QRS-T template
 * with RR jitter of at most 3%; AF stretches draw RR intervals from
 * mean·U(0.6, 1.4), drop the P wave and add 6-9 Hz fibrillatory waves.
 */
Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Storage and splitting

void save_bundle(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_bundle(const std::filesystem::path& dir);

/// Reads `t,lead1,...` CSV plus an annotation JSON ({fs?, af_intervals, r_peaks, rhythm_label, class_labels, patient?}).
EcgRecord import_csv(const std::filesystem::path& signal_csv, const std::filesystem::path& annotation_json,
		const std::string& id);

struct Split {
	std::vector<std::size_t> train, val, test;
};

/**
 * Patient-disjoint split. Patients are grouped by rhythm label, shuffled
 * within each group and handed one by one to the partition furthest behind
 * its target fraction.
 */
Split split_by_patient(const Dataset& ds, std::uint64_t seed, std::array<double, 3> fractions = {0.4, 0.3, 0.3});

} // namespace hkecg
