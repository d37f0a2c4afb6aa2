#include "hkecg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace hkecg {

using Json = nlohmann::json;

EpisodeList make_episodes(std::vector<Interval> episodes, std::span<const Index> r_peaks) {
	EpisodeList out;
	Index prev = 0;
	for (const auto& [on, off] : episodes) {
		if (on < prev || on >= off) throw DataError("episodes must be ascending, disjoint and non-empty");
		prev = off;
		const auto first = std::lower_bound(r_peaks.begin(), r_peaks.end(), on);
		out.onset_beats.push_back(first == r_peaks.end() ? -1 : first - r_peaks.begin());
		const auto last = std::upper_bound(r_peaks.begin(), r_peaks.end(), off - 1);
		out.offset_beats.push_back(last == r_peaks.begin() ? -1 : (last - r_peaks.begin()) - 1);
	}
	out.episodes = std::move(episodes);
	return out;
}

double uar(std::span<const int> labels, std::span<const int> predictions, int classes, std::vector<int>* excluded) {
	if (labels.size() != predictions.size()) throw UsageError("uar: label and prediction counts differ");
	std::vector<Index> tp(static_cast<std::size_t>(classes), 0), support(static_cast<std::size_t>(classes), 0);
	for (std::size_t i = 0; i < labels.size(); ++i) {
		if (labels[i] < 0 || labels[i] >= classes) throw UsageError("uar: label out of range");
		++support[static_cast<std::size_t>(labels[i])];
		if (predictions[i] == labels[i]) ++tp[static_cast<std::size_t>(labels[i])];
	}
	double sum = 0.0;
	int present = 0;
	for (int c = 0; c < classes; ++c) {
		const auto k = static_cast<std::size_t>(c);
		if (support[k] == 0) {
			if (excluded) excluded->push_back(c);
			continue;
		}
		sum += static_cast<double>(tp[k]) / static_cast<double>(support[k]);
		++present;
	}
	if (present == 0) throw UsageError("uar: no labelled class");
	return sum / present;
}

double uar_multilabel(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predictions, Index classes,
		std::vector<int>* excluded) {
	if (labels.size() != predictions.size() || classes < 1 || labels.size() % static_cast<std::size_t>(classes) != 0)
		throw UsageError("uar_multilabel: expected matching b x classes indicator matrices");
	double sum = 0.0;
	int present = 0;
	const std::size_t rows = labels.size() / static_cast<std::size_t>(classes);
	for (Index c = 0; c < classes; ++c) {
		Index tp = 0, support = 0;
		for (std::size_t r = 0; r < rows; ++r) {
			const std::size_t i = r * static_cast<std::size_t>(classes) + static_cast<std::size_t>(c);
			if (!labels[i]) continue;
			++support;
			tp += predictions[i] != 0;
		}
		if (support == 0) {
			if (excluded) excluded->push_back(static_cast<int>(c));
			continue;
		}
		sum += static_cast<double>(tp) / static_cast<double>(support);
		++present;
	}
	if (present == 0) throw UsageError("uar_multilabel: no positive label");
	return sum / present;
}

double sr(Rhythm label, Rhythm prediction) {
	// columns: non-AF, persistent, PAF
	static constexpr double matrix[3][3] = {
			{+1.0, -1.0, +0.5},
			{-2.0, +1.0, 0.0},
			{-1.0, 0.0, +1.0},
	};
	return matrix[static_cast<int>(label)][static_cast<int>(prediction)];
}

Index nearest_beat(std::span<const Index> r_peaks, Index sample) {
	if (r_peaks.empty()) return -1;
	const auto it = std::lower_bound(r_peaks.begin(), r_peaks.end(), sample);
	if (it == r_peaks.begin()) return 0;
	if (it == r_peaks.end()) return static_cast<Index>(r_peaks.size()) - 1;
	const Index after = it - r_peaks.begin();
	return (*it - sample) < (sample - *(it - 1)) ? after : after - 1;
}

namespace {

double match_boundaries(const std::vector<Index>& ann, const std::vector<Index>& pred) {
	std::vector<bool> used(pred.size(), false);
	double total = 0.0;
	for (Index a : ann) {
		std::size_t best = pred.size();
		Index best_dist = 0;
		for (std::size_t j = 0; j < pred.size(); ++j) {
			if (used[j]) continue;
			const Index d = std::abs(pred[j] - a);
			if (best == pred.size() || d < best_dist) {
				best = j;
				best_dist = d;
			}
		}
		if (best == pred.size() || best_dist > 2) continue;
		used[best] = true;
		total += best_dist <= 1 ? 1.0 : 0.5;
	}
	return total;
}

} // namespace

double se(const EpisodeList& pred, const EpisodeList& ann, std::span<const Index> r_peaks) {
	if (ann.episodes.empty() || pred.episodes.empty() || r_peaks.empty()) return 0.0;
	std::vector<Index> ann_on, ann_off, pred_on, pred_off;
	for (const auto& [on, off] : ann.episodes) {
		ann_on.push_back(nearest_beat(r_peaks, on));
		ann_off.push_back(nearest_beat(r_peaks, off - 1));
	}
	for (const auto& [on, off] : pred.episodes) {
		pred_on.push_back(nearest_beat(r_peaks, on));
		pred_off.push_back(nearest_beat(r_peaks, off - 1));
	}
	const double total = match_boundaries(ann_on, pred_on) + match_boundaries(ann_off, pred_off);
	return total / static_cast<double>(ann.episodes.size());
}

ScoreBreakdown s_af(std::span<const ScoreInput> records) {
	if (records.empty()) throw UsageError("s_af: no records");
	ScoreBreakdown out;
	double sum = 0.0;
	for (const auto& r : records) {
		RecordScore s;
		s.id = r.id;
		s.label = r.label;
		s.prediction = r.prediction;
		s.wa = r.annotated.size();
		s.wp = r.predicted.size();
		s.sr = sr(r.label, r.prediction);
		s.se = se(r.predicted, r.annotated, r.r_peaks);
		const Index m = std::max(s.wa, s.wp);
		s.weight = m == 0 ? 0.0 : static_cast<double>(s.wa) / static_cast<double>(m);
		s.score = s.sr + s.weight * s.se;
		sum += s.score;
		out.records.push_back(std::move(s));
	}
	out.s_af = sum / static_cast<double>(records.size());
	return out;
}

Json to_json(const ScoreBreakdown& s) {
	Json records = Json::array();
	for (const auto& r : s.records)
		records.push_back({{"id", r.id}, {"label", to_string(r.label)}, {"prediction", to_string(r.prediction)},
				{"wa", r.wa}, {"wp", r.wp}, {"sr", r.sr}, {"se", r.se}, {"weight", r.weight}, {"score", r.score}});
	return Json{{"s_af", s.s_af}, {"n", s.records.size()}, {"records", records}};
}

Detection mask_to_episodes(std::span<const float> prob, std::span<const Index> r_peaks, double fs, double threshold,
		double min_gap_s, double min_episode_s) {
	Mask mask(prob.size());
	for (std::size_t i = 0; i < prob.size(); ++i) mask[i] = prob[i] >= threshold;
	const auto raw = mask_intervals(mask);
	const double min_gap = min_gap_s * fs, min_len = min_episode_s * fs;
	std::vector<Interval> merged;
	for (const auto& iv : raw) {
		if (!merged.empty() && static_cast<double>(iv.first - merged.back().second) < min_gap)
			merged.back().second = iv.second;
		else
			merged.push_back(iv);
	}
	std::vector<Interval> kept;
	for (const auto& iv : merged)
		if (static_cast<double>(iv.second - iv.first) >= min_len) kept.push_back(iv);

	Detection d;
	if (kept.empty())
		d.rhythm = Rhythm::non_af;
	else if (kept.size() == 1 &&
			static_cast<double>(kept.front().second - kept.front().first) >= 0.99 * static_cast<double>(prob.size()))
		d.rhythm = Rhythm::persistent;
	else
		d.rhythm = Rhythm::paf;
	d.episodes = make_episodes(std::move(kept), r_peaks);
	return d;
}

ZTest ztest_uar(std::span<const std::uint8_t> correct_a, std::span<const std::uint8_t> correct_b) {
	if (correct_a.size() != correct_b.size() || correct_a.empty())
		throw UsageError("ztest: need equally sized non-empty correctness vectors");
	const auto N = static_cast<double>(correct_a.size());
	double ka = 0.0, kb = 0.0;
	for (auto v : correct_a) ka += v != 0;
	for (auto v : correct_b) kb += v != 0;
	const double pa = ka / N, pb = kb / N, pooled = (ka + kb) / (2.0 * N);
	ZTest out;
	out.weak = correct_a.size() < 30;
	const double denom = std::sqrt(pooled * (1.0 - pooled) * (2.0 / N));
	if (denom == 0.0) return out;
	out.z = (pa - pb) / denom;
	out.p = 0.5 * std::erfc(out.z / std::sqrt(2.0));
	return out;
}

Json to_json(const std::vector<RecordPrediction>& preds) {
	Json arr = Json::array();
	for (const auto& p : preds) {
		Json eps = Json::array();
		for (const auto& [on, off] : p.episodes) eps.push_back({on, off});
		arr.push_back({{"id", p.id}, {"pred_rhythm", to_string(p.rhythm)}, {"episodes", eps}});
	}
	return arr;
}

std::vector<RecordPrediction> predictions_from_json(const Json& j) {
	std::vector<RecordPrediction> out;
	try {
		if (!j.is_array()) throw DataError("prediction file must hold an array of records");
		for (const auto& e : j) {
			RecordPrediction p;
			p.id = e.at("id").get<std::string>();
			p.rhythm = parse_rhythm(e.at("pred_rhythm").get<std::string>());
			for (const auto& iv : e.at("episodes")) p.episodes.emplace_back(iv.at(0).get<Index>(), iv.at(1).get<Index>());
			out.push_back(std::move(p));
		}
	} catch (const Json::exception& e) {
		throw DataError(std::string("prediction file: ") + e.what());
	}
	return out;
}

void write_predictions(const std::vector<RecordPrediction>& preds, const std::filesystem::path& path) {
	std::ofstream out(path, std::ios::trunc);
	out << to_json(preds).dump(1) << "\n";
	if (!out) throw DataError("cannot write " + path.string());
}

std::vector<RecordPrediction> read_predictions(const std::filesystem::path& path) {
	std::ifstream in(path);
	if (!in) throw DataError("cannot open " + path.string());
	try {
		return predictions_from_json(Json::parse(in));
	} catch (const Json::exception& e) {
		throw DataError(path.string() + ": " + e.what());
	}
}

ScoreBreakdown score_predictions(const std::vector<RecordPrediction>& preds, const Dataset& ds) {
	std::map<std::string, const EcgRecord*> by_id;
	for (const auto& r : ds.records) by_id[r.id] = &r;
	std::vector<ScoreInput> inputs;
	for (const auto& p : preds) {
		const auto it = by_id.find(p.id);
		if (it == by_id.end()) throw DataError("prediction for unknown record '" + p.id + "'");
		const EcgRecord& rec = *it->second;
		if (!rec.has_mask()) throw DataError("record '" + rec.id + "' has no AF annotation");
		for (const auto& [on, off] : p.episodes)
			if (off > rec.length()) throw DataError("predicted episode beyond the end of '" + rec.id + "'");
		ScoreInput in;
		in.id = rec.id;
		in.label = rec.rhythm.value_or(derive_rhythm(rec.af_mask));
		in.prediction = p.rhythm;
		in.predicted = make_episodes(p.episodes, rec.r_peaks);
		in.annotated = make_episodes(mask_intervals(rec.af_mask), rec.r_peaks);
		in.r_peaks = rec.r_peaks;
		inputs.push_back(std::move(in));
	}
	return s_af(inputs);
}

} // namespace hkecg
