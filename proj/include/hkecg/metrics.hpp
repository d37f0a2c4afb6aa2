#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hkecg/ecgdata.hpp"

namespace hkecg {

using Interval = std::pair<Index, Index>; // [onset, offset) in samples

/**
 * AF episodes in sample and beat coordinates. Onset beat is the first
 * R-peak at or after the onset; offset beat the last R-peak at or before the
 * final AF sample (-1 when no such peak exists).
 */
struct EpisodeList {
	std::vector<Interval> episodes;
	std::vector<Index> onset_beats;
	std::vector<Index> offset_beats;

	Index size() const { return static_cast<Index>(episodes.size()); }
	bool operator==(const EpisodeList&) const = default;
};

/// Throws DataError unless episodes are ascending, disjoint and non-empty.
EpisodeList make_episodes(std::vector<Interval> episodes, std::span<const Index> r_peaks);

// ---------------------------------------------------------------------------
// Recall

/**
 * Unweighted average recall over classes 0..classes-1. Classes absent from
 * `labels` are skipped and reported through `excluded`.
 */
double uar(std::span<const int> labels, std::span<const int> predictions, int classes,
		std::vector<int>* excluded = nullptr);

/// Mean per-label recall for row-major b x c binary indicators.
double uar_multilabel(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predictions, Index classes,
		std::vector<int>* excluded = nullptr);

// ---------------------------------------------------------------------------
// AF scoring

/// Rhythm score matrix; rows are labels, columns predictions.
double sr(Rhythm label, Rhythm prediction);

/// Index of the R-peak nearest to `sample` (earlier peak on ties); -1 when there are none.
Index nearest_beat(std::span<const Index> r_peaks, Index sample);

/**
 * Boundary score per annotated episode: onsets and offsets are matched
 * one-to-one, greedily and left to right, to the nearest unmatched predicted
 * boundary in beats; +1 within one beat, +0.5 within two. The total is
 * divided by the number of annotated episodes.
 */
double se(const EpisodeList& pred, const EpisodeList& ann, std::span<const Index> r_peaks);

struct RecordScore {
	std::string id;
	Rhythm label = Rhythm::non_af;
	Rhythm prediction = Rhythm::non_af;
	Index wa = 0;
	Index wp = 0;
	double sr = 0.0;
	double se = 0.0;
	double weight = 0.0;
	double score = 0.0;
};

struct ScoreBreakdown {
	std::vector<RecordScore> records;
	double s_af = 0.0;
};

struct ScoreInput {
	std::string id;
	Rhythm label = Rhythm::non_af;
	Rhythm prediction = Rhythm::non_af;
	EpisodeList predicted;
	EpisodeList annotated;
	std::vector<Index> r_peaks;
};

/// Mean over records of Sr + Wa / max(Wa, Wp) · Se, with weight 0 when both counts are 0.
ScoreBreakdown s_af(std::span<const ScoreInput> records);

nlohmann::json to_json(const ScoreBreakdown& s);

struct Detection {
	EpisodeList episodes;
	Rhythm rhythm = Rhythm::non_af;
};

/**
 * Thresholds per-sample probabilities, merges gaps shorter than `min_gap_s`,
 * drops episodes shorter than `min_episode_s`. A single episode covering at
 * least 99% of the record is persistent AF.
 */
Detection mask_to_episodes(std::span<const float> prob, std::span<const Index> r_peaks, double fs,
		double threshold = 0.5, double min_gap_s = 0.5, double min_episode_s = 0.5);

struct ZTest {
	double z = 0.0;
	double p = 0.5;
	bool weak = false; // fewer than 30 samples
};

/// One-tailed two-proportion z-test that model a is more often correct than b.
ZTest ztest_uar(std::span<const std::uint8_t> correct_a, std::span<const std::uint8_t> correct_b);

// ---------------------------------------------------------------------------
// Prediction files

struct RecordPrediction {
	std::string id;
	Rhythm rhythm = Rhythm::non_af;
	std::vector<Interval> episodes;

	bool operator==(const RecordPrediction&) const = default;
};

nlohmann::json to_json(const std::vector<RecordPrediction>& preds);
std::vector<RecordPrediction> predictions_from_json(const nlohmann::json& j);
void write_predictions(const std::vector<RecordPrediction>& preds, const std::filesystem::path& path);
std::vector<RecordPrediction> read_predictions(const std::filesystem::path& path);

/// Scores predictions against the annotated records they name. Throws DataError on unknown ids or missing labels.
ScoreBreakdown score_predictions(const std::vector<RecordPrediction>& preds, const Dataset& ds);

} // namespace hkecg
