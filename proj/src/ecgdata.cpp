#include "hkecg/ecgdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "hkecg/rng.hpp"

namespace hkecg {

using Json = nlohmann::json;

std::string to_string(Rhythm r) {
	switch (r) {
	case Rhythm::non_af: return "non_af";
	case Rhythm::persistent: return "persistent";
	case Rhythm::paf: return "paf";
	}
	return "?";
}

Rhythm parse_rhythm(const std::string& s) {
	if (s == "non_af") return Rhythm::non_af;
	if (s == "persistent") return Rhythm::persistent;
	if (s == "paf") return Rhythm::paf;
	throw DataError("unknown rhythm label '" + s + "'");
}

void EcgRecord::validate() const {
	const std::string where = "record '" + id + "': ";
	if (signal.rank() != 2) throw DataError(where + "signal must be leads x samples");
	if (!leads.empty() && static_cast<Index>(leads.size()) != lead_count())
		throw DataError(where + "lead names do not match the signal");
	if (fs <= 0.0) throw DataError(where + "sampling rate must be positive");
	const Index T = length();
	if (has_mask() && static_cast<Index>(af_mask.size()) != T)
		throw DataError(where + "af_mask length " + std::to_string(af_mask.size()) + " != " + std::to_string(T));
	for (std::size_t i = 0; i < r_peaks.size(); ++i) {
		if (r_peaks[i] < 0 || r_peaks[i] >= T)
			throw DataError(where + "r_peak " + std::to_string(r_peaks[i]) + " outside the signal");
		if (i > 0 && r_peaks[i] <= r_peaks[i - 1])
			throw DataError(where + "r_peaks not strictly ascending at position " + std::to_string(i));
	}
	if (rhythm && has_mask() && derive_rhythm(af_mask) != *rhythm)
		throw DataError(where + "rhythm label " + to_string(*rhythm) + " contradicts af_mask");
}

// ---------------------------------------------------------------------------
// Filtering

Sos butter_bandpass(int order, double low, double high, double fs) {
	if (order < 1) throw ConfigError("bandpass: order must be >= 1");
	if (!(fs > 2.0 * high)) throw ConfigError("bandpass: sampling rate must exceed twice the upper cutoff");
	if (!(low > 0.0 && low < high)) throw ConfigError("bandpass: need 0 < low < high");
	using C = std::complex<double>;
	const double pi = std::numbers::pi;
	const double fs2 = 2.0 * fs;
	const double wl = fs2 * std::tan(pi * low / fs);
	const double wh = fs2 * std::tan(pi * high / fs);
	const double bw = wh - wl;
	const double w0sq = wl * wh;

	// Analog prototype -> band-pass -> bilinear. The band-pass has `order` zeros
	// at s = 0 (mapped to z = 1) and `order` more at infinity (mapped to z = -1).
	std::vector<C> poles;
	C gain = std::pow(bw * fs2, order);
	for (int m = -order + 1; m < order; m += 2) {
		const C p = -std::exp(C(0.0, pi * m / (2.0 * order)));
		const C half = p * bw / 2.0;
		const C root = std::sqrt(half * half - w0sq);
		for (const C& s : {half + root, half - root}) {
			poles.push_back((fs2 + s) / (fs2 - s));
			gain /= fs2 - s;
		}
	}

	std::vector<C> complex_poles, real_poles;
	for (const C& q : poles) {
		if (std::abs(q.imag()) < 1e-12)
			real_poles.push_back(q);
		else if (q.imag() > 0)
			complex_poles.push_back(q);
	}
	std::sort(real_poles.begin(), real_poles.end(), [](C a, C b) { return a.real() < b.real(); });
	Sos sos;
	for (const C& q : complex_poles) sos.push_back({1.0, 0.0, -1.0, 1.0, -2.0 * q.real(), std::norm(q)});
	for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
		const double a = real_poles[i].real(), b = real_poles[i + 1].real();
		sos.push_back({1.0, 0.0, -1.0, 1.0, -(a + b), a * b});
	}
	if (real_poles.size() % 2 != 0 || static_cast<int>(sos.size()) != order)
		throw std::logic_error("bandpass: unexpected pole layout");
	for (int i = 0; i < 3; ++i) sos.front()[static_cast<std::size_t>(i)] *= gain.real();
	return sos;
}

double sos_gain(const Sos& sos, double freq, double fs) {
	const std::complex<double> z1 = std::exp(std::complex<double>(0.0, -2.0 * std::numbers::pi * freq / fs));
	const auto z2 = z1 * z1;
	std::complex<double> h = 1.0;
	for (const auto& s : sos) h *= (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2);
	return std::abs(h);
}

void sosfilt(const Sos& sos, std::span<double> x, std::span<std::array<double, 2>> state) {
	for (std::size_t k = 0; k < sos.size(); ++k) {
		const auto& s = sos[k];
		double z0 = state[k][0], z1 = state[k][1];
		for (double& v : x) {
			const double y = s[0] * v + z0;
			z0 = s[1] * v + z1 - s[4] * y;
			z1 = s[2] * v - s[5] * y;
			v = y;
		}
		state[k] = {z0, z1};
	}
}

std::vector<std::array<double, 2>> sosfilt_zi(const Sos& sos) {
	std::vector<std::array<double, 2>> zi;
	double scale = 1.0;
	for (const auto& s : sos) {
		const double b0 = s[0], b1 = s[1], b2 = s[2], a1 = s[4], a2 = s[5];
		const double B0 = b1 - a1 * b0, B1 = b2 - a2 * b0;
		const double z0 = (B0 + B1) / (1.0 + a1 + a2);
		const double z1 = B1 - a2 * z0;
		zi.push_back({scale * z0, scale * z1});
		scale *= (b0 + b1 + b2) / (1.0 + a1 + a2);
	}
	return zi;
}

std::vector<double> sosfiltfilt(const Sos& sos, std::span<const double> x) {
	const auto n = static_cast<Index>(x.size());
	Index zero_b = 0, zero_a = 0;
	for (const auto& s : sos) {
		zero_b += s[2] == 0.0;
		zero_a += s[5] == 0.0;
	}
	const Index pad = 3 * (2 * static_cast<Index>(sos.size()) + 1 - std::min(zero_b, zero_a));
	if (n <= pad) throw DataError("filter: signal of " + std::to_string(n) + " samples is too short (need > " +
			std::to_string(pad) + ")");

	std::vector<double> ext(static_cast<std::size_t>(n + 2 * pad));
	for (Index i = 0; i < pad; ++i) ext[static_cast<std::size_t>(i)] = 2.0 * x[0] - x[static_cast<std::size_t>(pad - i)];
	std::copy(x.begin(), x.end(), ext.begin() + pad);
	for (Index i = 0; i < pad; ++i)
		ext[static_cast<std::size_t>(pad + n + i)] = 2.0 * x[static_cast<std::size_t>(n - 1)] - x[static_cast<std::size_t>(n - 2 - i)];

	const auto zi = sosfilt_zi(sos);
	auto state = zi;
	for (auto& s : state) s = {s[0] * ext.front(), s[1] * ext.front()};
	sosfilt(sos, ext, state);
	std::reverse(ext.begin(), ext.end());
	state = zi;
	for (auto& s : state) s = {s[0] * ext.front(), s[1] * ext.front()};
	sosfilt(sos, ext, state);
	std::reverse(ext.begin(), ext.end());
	return {ext.begin() + pad, ext.begin() + pad + n};
}

Tensor<float> bandpass(const Tensor<float>& signal, double fs, double low, double high, int order) {
	if (signal.rank() != 2) throw ShapeError("bandpass expects leads x samples");
	const Sos sos = butter_bandpass(order, low, high, fs);
	Tensor<float> out(signal.shape());
	const Index T = signal.dim(1);
	std::vector<double> row(static_cast<std::size_t>(T));
	for (Index l = 0; l < signal.dim(0); ++l) {
		for (Index t = 0; t < T; ++t) row[static_cast<std::size_t>(t)] = signal(l, t);
		const auto y = sosfiltfilt(sos, row);
		for (Index t = 0; t < T; ++t) out(l, t) = static_cast<float>(y[static_cast<std::size_t>(t)]);
	}
	return out;
}

// ---------------------------------------------------------------------------
// Preprocessing

ZScored zscore(const Tensor<float>& signal) {
	if (signal.rank() != 2) throw ShapeError("zscore expects leads x samples");
	ZScored out{Tensor<float>(signal.shape()), std::vector<bool>(static_cast<std::size_t>(signal.dim(0)), false)};
	const Index T = signal.dim(1);
	for (Index l = 0; l < signal.dim(0); ++l) {
		double mean = 0.0;
		for (Index t = 0; t < T; ++t) mean += signal(l, t);
		mean /= static_cast<double>(T);
		double var = 0.0;
		for (Index t = 0; t < T; ++t) var += (signal(l, t) - mean) * (signal(l, t) - mean);
		const double sd = std::sqrt(var / static_cast<double>(T));
		if (sd <= 1e-12 * std::max(1.0, std::abs(mean))) {
			out.flat[static_cast<std::size_t>(l)] = true;
			continue;
		}
		for (Index t = 0; t < T; ++t) out.signal(l, t) = static_cast<float>((signal(l, t) - mean) / sd);
	}
	return out;
}

Segment slice(const EcgRecord& rec, Index start, Index length) {
	if (start < 0 || length < 1 || start + length > rec.length()) throw UsageError("slice outside the record");
	Segment s;
	s.parent = rec.id;
	s.start = start;
	s.signal = Tensor<float>({rec.lead_count(), length});
	for (Index l = 0; l < rec.lead_count(); ++l)
		for (Index t = 0; t < length; ++t) s.signal(l, t) = rec.signal(l, start + t);
	if (rec.has_mask()) s.af_mask.assign(rec.af_mask.begin() + start, rec.af_mask.begin() + start + length);
	for (Index r : rec.r_peaks)
		if (r >= start && r < start + length) s.r_peaks.push_back(r - start);
	return s;
}

Segmentation segment(const EcgRecord& rec, double win_s, double hop_s) {
	const auto win = static_cast<Index>(std::lround(win_s * rec.fs));
	const auto hop = static_cast<Index>(std::lround(hop_s * rec.fs));
	if (win < 1 || hop < 1) throw ConfigError("segment: window and hop must be at least one sample");
	Segmentation out;
	const Index T = rec.length();
	if (T < win) {
		out.too_short = true;
		return out;
	}
	const Index count = (T - win) / hop + 1;
	for (Index i = 0; i < count; ++i) out.segments.push_back(slice(rec, i * hop, win));
	return out;
}

Segment center_crop(const EcgRecord& rec, double seconds) {
	const auto len = static_cast<Index>(std::lround(seconds * rec.fs));
	if (rec.length() < len)
		throw DataError("record '" + rec.id + "' is shorter than the " + std::to_string(seconds) + " s crop");
	return slice(rec, (rec.length() - len) / 2, len);
}

Rhythm derive_rhythm(std::span<const std::uint8_t> mask) {
	if (mask.empty()) throw UsageError("derive_rhythm: empty mask");
	const auto ones = std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; });
	if (ones == 0) return Rhythm::non_af;
	if (ones == static_cast<std::ptrdiff_t>(mask.size())) return Rhythm::persistent;
	return Rhythm::paf;
}

Tensor<float> pad_channels(const Tensor<float>& x, Index n) {
	if (x.rank() != 2) throw ShapeError("pad_channels expects channels x samples");
	if (n < x.dim(0)) throw UsageError("pad_channels: target " + std::to_string(n) + " below channel count");
	Tensor<float> out({n, x.dim(1)});
	std::copy(x.values().begin(), x.values().end(), out.data());
	return out;
}

EcgRecord preprocess_detection(const EcgRecord& rec) {
	EcgRecord out = rec;
	out.signal = zscore(bandpass(rec.signal, rec.fs)).signal;
	return out;
}

EcgRecord preprocess_classification(const EcgRecord& rec) {
	EcgRecord out = rec;
	out.signal = zscore(rec.signal).signal;
	return out;
}

std::vector<std::pair<Index, Index>> mask_intervals(std::span<const std::uint8_t> mask) {
	std::vector<std::pair<Index, Index>> out;
	const auto T = static_cast<Index>(mask.size());
	for (Index t = 0; t < T;) {
		if (!mask[static_cast<std::size_t>(t)]) {
			++t;
			continue;
		}
		Index end = t;
		while (end < T && mask[static_cast<std::size_t>(end)]) ++end;
		out.emplace_back(t, end);
		t = end;
	}
	return out;
}

Mask intervals_mask(const std::vector<std::pair<Index, Index>>& intervals, Index length) {
	Mask mask(static_cast<std::size_t>(length), 0);
	Index prev_end = 0;
	for (const auto& [on, off] : intervals) {
		if (on < prev_end || on >= off || off > length)
			throw DataError("af_intervals must be ascending, disjoint, non-empty [start, end) pairs inside the signal");
		std::fill(mask.begin() + on, mask.begin() + off, 1);
		prev_end = off;
	}
	return mask;
}

// ---------------------------------------------------------------------------
// Synthetic ECG

SynthSpec synth_spec_from_json(const Json& j) {
	if (!j.is_object()) throw ConfigError("synth spec: expected an object");
	static const std::set<std::string> known{
			"fs", "duration_s", "leads", "records_per_patient", "non_af", "paf", "persistent", "name"};
	for (const auto& [key, value] : j.items())
		if (!known.count(key)) throw ConfigError("synth spec: unknown key '" + key + "'");
	SynthSpec s;
	try {
		s.fs = j.value("fs", s.fs);
		s.duration_s = j.value("duration_s", s.duration_s);
		s.leads = j.value("leads", s.leads);
		s.records_per_patient = j.value("records_per_patient", s.records_per_patient);
		s.non_af = j.value("non_af", s.non_af);
		s.paf = j.value("paf", s.paf);
		s.persistent = j.value("persistent", s.persistent);
		s.name = j.value("name", s.name);
	} catch (const Json::exception& e) {
		throw ConfigError(std::string("synth spec: ") + e.what());
	}
	if (s.fs <= 0 || s.duration_s < 10.0 || s.leads < 1 || s.records_per_patient < 1 || s.non_af < 0 || s.paf < 0 ||
			s.persistent < 0 || s.non_af + s.paf + s.persistent < 1)
		throw ConfigError("synth spec: need fs > 0, duration >= 10 s, leads >= 1 and at least one patient");
	return s;
}

Json to_json(const SynthSpec& s) {
	return Json{{"fs", s.fs}, {"duration_s", s.duration_s}, {"leads", s.leads},
			{"records_per_patient", s.records_per_patient}, {"non_af", s.non_af}, {"paf", s.paf},
			{"persistent", s.persistent}, {"name", s.name}};
}

namespace {

constexpr double min_episode_s = 5.0;

/// 1-3 AF episodes of at least 5 s, separated by at least 5 s and leaving sinus rhythm at both ends.
Mask paf_mask(Index T, double fs, Rng& rng) {
	const double total = static_cast<double>(T) / fs;
	const double edge = min_episode_s / 2.0;
	int max_eps = 0;
	for (int k = 1; k <= 3; ++k)
		if (k * min_episode_s + (k - 1) * min_episode_s + 2 * edge <= 0.8 * total) max_eps = k;
	if (max_eps == 0) max_eps = 1;
	const int eps = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_eps)));

	// Slots: edge, ep, gap, ep, ..., ep, edge. Slack is shared by random weights.
	std::vector<double> minimum{edge};
	for (int k = 0; k < eps; ++k) {
		minimum.push_back(min_episode_s);
		minimum.push_back(k + 1 < eps ? min_episode_s : edge);
	}
	double used = 0.0;
	for (double m : minimum) used += m;
	const double slack = std::max(0.0, total - used);
	std::vector<double> w(minimum.size());
	double wsum = 0.0;
	for (double& v : w) wsum += (v = rng.uniform(0.2, 1.0));
	Mask mask(static_cast<std::size_t>(T), 0);
	double t = 0.0;
	for (std::size_t i = 0; i < minimum.size(); ++i) {
		const double len = minimum[i] + slack * w[i] / wsum;
		if (i % 2 == 1) {
			const auto on = static_cast<Index>(std::lround(t * fs));
			const auto off = std::min(T, static_cast<Index>(std::lround((t + len) * fs)));
			std::fill(mask.begin() + on, mask.begin() + off, 1);
		}
		t += len;
	}
	return mask;
}

double gauss(double dt, double sigma) {
	return std::exp(-0.5 * dt * dt / (sigma * sigma));
}

EcgRecord synth_record(const SynthSpec& spec, Rhythm rhythm, const std::string& id, const std::string& patient,
		Rng& rng) {
	const double fs = spec.fs;
	const auto T = static_cast<Index>(std::lround(spec.duration_s * fs));
	EcgRecord rec;
	rec.id = id;
	rec.patient = patient;
	rec.fs = fs;
	for (Index l = 0; l < spec.leads; ++l) rec.leads.push_back("lead" + std::to_string(l + 1));
	rec.rhythm = rhythm;
	rec.class_labels = {rhythm == Rhythm::non_af ? "NSR" : "AF"};
	switch (rhythm) {
	case Rhythm::non_af: rec.af_mask.assign(static_cast<std::size_t>(T), 0); break;
	case Rhythm::persistent: rec.af_mask.assign(static_cast<std::size_t>(T), 1); break;
	case Rhythm::paf: rec.af_mask = paf_mask(T, fs, rng); break;
	}

	const double rr_sinus = 60.0 / rng.uniform(60.0, 85.0);
	const double rr_af = 60.0 / rng.uniform(80.0, 115.0);
	std::vector<bool> beat_af;
	for (double tau = rng.uniform(0.2, 0.8) * rr_sinus;;) {
		const auto idx = static_cast<Index>(std::lround(tau * fs));
		if (idx >= T) break;
		const bool af = rec.af_mask[static_cast<std::size_t>(idx)] != 0;
		rec.r_peaks.push_back(idx);
		beat_af.push_back(af);
		tau += af ? rr_af * rng.uniform(0.6, 1.4) : rr_sinus * rng.uniform(0.97, 1.03);
	}

	std::vector<double> gain(static_cast<std::size_t>(spec.leads));
	for (Index l = 0; l < spec.leads; ++l) gain[static_cast<std::size_t>(l)] = l == 0 ? 1.0 : rng.uniform(0.5, 0.9);
	const double f_freq = rng.uniform(6.0, 9.0);
	const double f_amp = rng.uniform(0.06, 0.1);
	const double f_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
	const double wander_freq = rng.uniform(0.15, 0.35);

	std::vector<double> clean(static_cast<std::size_t>(T), 0.0), fwave(static_cast<std::size_t>(T), 0.0);
	const auto reach = static_cast<Index>(std::lround(0.5 * fs));
	for (std::size_t b = 0; b < rec.r_peaks.size(); ++b) {
		const Index r = rec.r_peaks[b];
		for (Index t = std::max<Index>(0, r - reach); t < std::min(T, r + reach); ++t) {
			const double dt = static_cast<double>(t - r) / fs;
			double v = gauss(dt, 0.012) - 0.12 * gauss(dt + 0.03, 0.008) - 0.18 * gauss(dt - 0.03, 0.01) +
					0.3 * gauss(dt - 0.28, 0.05);
			if (!beat_af[b]) v += 0.15 * gauss(dt + 0.16, 0.022);
			clean[static_cast<std::size_t>(t)] += v;
		}
	}
	for (Index t = 0; t < T; ++t) {
		if (!rec.af_mask[static_cast<std::size_t>(t)]) continue;
		const double s = static_cast<double>(t) / fs;
		fwave[static_cast<std::size_t>(t)] = f_amp * (1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * 0.5 * s)) *
				std::sin(2.0 * std::numbers::pi * f_freq * s + f_phase);
	}
	rec.signal = Tensor<float>({spec.leads, T});
	for (Index l = 0; l < spec.leads; ++l) {
		const double g = gain[static_cast<std::size_t>(l)];
		const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
		for (Index t = 0; t < T; ++t) {
			const double s = static_cast<double>(t) / fs;
			const double v = g * (clean[static_cast<std::size_t>(t)] + fwave[static_cast<std::size_t>(t)]) +
					0.1 * std::sin(2.0 * std::numbers::pi * wander_freq * s + phase) + rng.normal(0.0, 0.02);
			rec.signal(l, t) = static_cast<float>(v);
		}
	}
	return rec;
}

} // namespace

Dataset synth_generate(const SynthSpec& spec, std::uint64_t seed) {
	Rng rng(seed);
	Dataset ds;
	ds.name = spec.name;
	ds.fs = spec.fs;
	for (Index l = 0; l < spec.leads; ++l) ds.leads.push_back("lead" + std::to_string(l + 1));
	Index patient = 0;
	auto emit = [&](Rhythm rhythm, Index count) {
		for (Index p = 0; p < count; ++p, ++patient) {
			char pid[32];
			std::snprintf(pid, sizeof pid, "p%03td", patient);
			for (Index r = 0; r < spec.records_per_patient; ++r)
				ds.records.push_back(synth_record(spec, rhythm, std::string(pid) + "_r" + std::to_string(r), pid, rng));
		}
	};
	emit(Rhythm::non_af, spec.non_af);
	emit(Rhythm::paf, spec.paf);
	emit(Rhythm::persistent, spec.persistent);
	return ds;
}

// ---------------------------------------------------------------------------
// Bundle storage

namespace {

Json read_json(const std::filesystem::path& path) {
	std::ifstream in(path);
	if (!in) throw DataError("cannot open " + path.string());
	try {
		return Json::parse(in);
	} catch (const Json::exception& e) {
		throw DataError(path.string() + ": " + e.what());
	}
}

void write_text(const std::filesystem::path& path, const std::string& text) {
	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	out << text;
	if (!out) throw DataError("cannot write " + path.string());
}

Json annotation_json(const EcgRecord& rec) {
	Json ann = Json::object();
	if (rec.has_mask()) {
		Json iv = Json::array();
		for (const auto& [on, off] : mask_intervals(rec.af_mask)) iv.push_back({on, off});
		ann["af_intervals"] = iv;
	}
	ann["r_peaks"] = rec.r_peaks;
	if (rec.rhythm) ann["rhythm_label"] = to_string(*rec.rhythm);
	ann["class_labels"] = rec.class_labels;
	return ann;
}

void apply_annotation(EcgRecord& rec, const Json& ann, const std::string& source) {
	try {
		if (ann.contains("af_intervals")) {
			std::vector<std::pair<Index, Index>> iv;
			for (const auto& p : ann.at("af_intervals")) iv.emplace_back(p.at(0).get<Index>(), p.at(1).get<Index>());
			rec.af_mask = intervals_mask(iv, rec.length());
		}
		if (ann.contains("r_peaks")) rec.r_peaks = ann.at("r_peaks").get<std::vector<Index>>();
		if (ann.contains("rhythm_label")) rec.rhythm = parse_rhythm(ann.at("rhythm_label").get<std::string>());
		if (ann.contains("class_labels")) rec.class_labels = ann.at("class_labels").get<std::vector<std::string>>();
	} catch (const Json::exception& e) {
		throw DataError(source + ": record '" + rec.id + "': " + e.what());
	} catch (const DataError& e) {
		throw DataError(source + ": record '" + rec.id + "': " + e.what());
	}
}

} // namespace

void save_bundle(const Dataset& ds, const std::filesystem::path& dir) {
	std::filesystem::create_directories(dir);
	Json records = Json::array();
	for (const auto& rec : ds.records) {
		rec.validate();
		Json entry{{"id", rec.id}, {"patient", rec.patient}, {"length", rec.length()}, {"class_labels", rec.class_labels}};
		if (rec.rhythm) entry["rhythm_label"] = to_string(*rec.rhythm);
		records.push_back(entry);

		std::ofstream out(dir / (rec.id + ".f32"), std::ios::binary | std::ios::trunc);
		out.write(reinterpret_cast<const char*>(rec.signal.data()),
				static_cast<std::streamsize>(rec.signal.size() * sizeof(float)));
		if (!out) throw DataError("cannot write signal for " + rec.id);
		write_text(dir / (rec.id + ".ann.json"), annotation_json(rec).dump(1) + "\n");
	}
	const Json manifest{{"name", ds.name}, {"fs", ds.fs}, {"leads", ds.leads}, {"records", records}};
	write_text(dir / "manifest.json", manifest.dump(1) + "\n");
}

Dataset load_bundle(const std::filesystem::path& dir) {
	const auto manifest_path = dir / "manifest.json";
	const Json manifest = read_json(manifest_path);
	Dataset ds;
	try {
		ds.name = manifest.at("name").get<std::string>();
		ds.fs = manifest.at("fs").get<double>();
		ds.leads = manifest.at("leads").get<std::vector<std::string>>();
		for (const auto& entry : manifest.at("records")) {
			EcgRecord rec;
			rec.id = entry.at("id").get<std::string>();
			rec.patient = entry.value("patient", rec.id);
			rec.fs = ds.fs;
			rec.leads = ds.leads;
			const auto length = entry.at("length").get<Index>();
			if (length < 1) throw DataError("record '" + rec.id + "': length must be positive");
			rec.signal = Tensor<float>({static_cast<Index>(ds.leads.size()), length});
			const auto sig_path = dir / (rec.id + ".f32");
			std::error_code ec;
			const auto bytes = std::filesystem::file_size(sig_path, ec);
			if (ec || bytes != static_cast<std::uintmax_t>(rec.signal.size()) * sizeof(float))
				throw DataError("record '" + rec.id + "': signal file missing or of wrong size");
			std::ifstream in(sig_path, std::ios::binary);
			in.read(reinterpret_cast<char*>(rec.signal.data()),
					static_cast<std::streamsize>(rec.signal.size() * sizeof(float)));
			if (!in) throw DataError("record '" + rec.id + "': cannot read signal");
			apply_annotation(rec, read_json(dir / (rec.id + ".ann.json")), manifest_path.string());
			if (entry.contains("rhythm_label") && rec.rhythm &&
					parse_rhythm(entry.at("rhythm_label").get<std::string>()) != *rec.rhythm)
				throw DataError("record '" + rec.id + "': manifest and annotation disagree on rhythm");
			rec.validate();
			ds.records.push_back(std::move(rec));
		}
	} catch (const Json::exception& e) {
		throw DataError(manifest_path.string() + ": " + e.what());
	}
	return ds;
}

EcgRecord import_csv(const std::filesystem::path& signal_csv, const std::filesystem::path& annotation_json,
		const std::string& id) {
	std::ifstream in(signal_csv);
	if (!in) throw DataError("cannot open " + signal_csv.string());
	const std::string where = signal_csv.string() + ": ";
	std::string line;
	if (!std::getline(in, line)) throw DataError(where + "empty file");
	std::vector<std::string> header;
	{
		std::stringstream ss(line);
		std::string cell;
		while (std::getline(ss, cell, ',')) header.push_back(cell);
	}
	if (header.size() < 2 || header[0] != "t") throw DataError(where + "header must be t,lead1,...");
	const std::size_t leads = header.size() - 1;
	std::vector<double> times;
	std::vector<std::vector<float>> columns(leads);
	for (std::size_t row = 2; std::getline(in, line); ++row) {
		if (line.empty()) continue;
		std::size_t pos = 0;
		for (std::size_t c = 0; c <= leads; ++c) {
			const std::size_t end = std::min(line.find(',', pos), line.size());
			double v = 0.0;
			const auto res = std::from_chars(line.data() + pos, line.data() + end, v);
			if (res.ec != std::errc() || res.ptr != line.data() + end)
				throw DataError(where + "line " + std::to_string(row) + ": bad number in column " + std::to_string(c + 1));
			if (c == 0)
				times.push_back(v);
			else
				columns[c - 1].push_back(static_cast<float>(v));
			if (c < leads && end == line.size()) throw DataError(where + "line " + std::to_string(row) + ": too few columns");
			pos = end + 1;
		}
		if (pos <= line.size()) throw DataError(where + "line " + std::to_string(row) + ": too many columns");
	}
	if (times.empty()) throw DataError(where + "no samples");

	const Json ann = read_json(annotation_json);
	EcgRecord rec;
	rec.id = id;
	rec.patient = ann.value("patient", id);
	rec.leads.assign(header.begin() + 1, header.end());
	if (ann.contains("fs")) {
		rec.fs = ann.at("fs").get<double>();
	} else {
		if (times.size() < 2 || !(times.back() > times.front())) throw DataError(where + "cannot infer sampling rate");
		rec.fs = std::round(1e6 * static_cast<double>(times.size() - 1) / (times.back() - times.front())) / 1e6;
	}
	const auto T = static_cast<Index>(times.size());
	rec.signal = Tensor<float>({static_cast<Index>(leads), T});
	for (std::size_t l = 0; l < leads; ++l)
		std::copy(columns[l].begin(), columns[l].end(), rec.signal.data() + static_cast<Index>(l) * T);
	apply_annotation(rec, ann, annotation_json.string());
	try {
		rec.validate();
	} catch (const DataError& e) {
		throw DataError(annotation_json.string() + ": " + e.what());
	}
	return rec;
}

// ---------------------------------------------------------------------------
// Splitting

Split split_by_patient(const Dataset& ds, std::uint64_t seed, std::array<double, 3> fractions) {
	double total = 0.0;
	for (double f : fractions) {
		if (f < 0.0) throw ConfigError("split fractions must be non-negative");
		total += f;
	}
	if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");

	std::vector<std::string> patients;
	std::map<std::string, std::vector<std::size_t>> records_of;
	std::map<std::string, int> stratum_of;
	for (std::size_t i = 0; i < ds.records.size(); ++i) {
		const auto& rec = ds.records[i];
		if (!records_of.count(rec.patient)) {
			patients.push_back(rec.patient);
			stratum_of[rec.patient] = rec.rhythm ? static_cast<int>(*rec.rhythm) : 3;
		}
		records_of[rec.patient].push_back(i);
	}
	std::vector<std::vector<std::string>> strata(4);
	for (const auto& p : patients) strata[static_cast<std::size_t>(stratum_of[p])].push_back(p);

	Rng rng(seed);
	Split split;
	std::array<std::vector<std::size_t>*, 3> parts{&split.train, &split.val, &split.test};
	std::array<double, 3> assigned{0, 0, 0};
	double seen = 0.0;
	for (auto& stratum : strata) {
		rng.shuffle(stratum.begin(), stratum.end());
		for (const auto& p : stratum) {
			seen += 1.0;
			std::size_t best = 0;
			double best_deficit = -1e300;
			for (std::size_t k = 0; k < 3; ++k) {
				const double deficit = fractions[k] * seen - assigned[k];
				if (deficit > best_deficit + 1e-12) {
					best_deficit = deficit;
					best = k;
				}
			}
			assigned[best] += 1.0;
			for (std::size_t r : records_of[p]) parts[best]->push_back(r);
		}
	}
	for (auto* part : parts) std::sort(part->begin(), part->end());
	return split;
}

} // namespace hkecg
