#include "hkecg/training.hpp"

#include <cstdlib>
#include <numeric>
#include <thread>

namespace hkecg {

using Json = nlohmann::json;

double binary_cross_entropy(std::span<const float> p, std::span<const float> y) {
	if (p.size() != y.size() || p.empty()) throw UsageError("binary_cross_entropy: need equal, non-empty inputs");
	double total = 0.0;
	for (std::size_t i = 0; i < p.size(); ++i) {
		const double pc = std::clamp(static_cast<double>(p[i]), detail::prob_floor, 1.0 - detail::prob_floor);
		total -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
	}
	return total / static_cast<double>(p.size());
}

int thread_count() {
	const char* env = std::getenv("HK_THREADS");
	if (!env) return 1;
	const int n = std::atoi(env);
	return n >= 1 ? n : 1;
}

namespace {

/// Runs body(i) for i in [0, n) on up to `threads` workers with a fixed static partition.
template<typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
	const auto workers = static_cast<std::size_t>(std::max(1, std::min<int>(threads, static_cast<int>(n))));
	if (workers <= 1) {
		for (std::size_t i = 0; i < n; ++i) body(i);
		return;
	}
	std::vector<std::thread> pool;
	std::vector<std::exception_ptr> errors(workers);
	for (std::size_t w = 0; w < workers; ++w) {
		pool.emplace_back([&, w] {
			try {
				for (std::size_t i = w; i < n; i += workers) body(i);
			} catch (...) {
				errors[w] = std::current_exception();
			}
		});
	}
	for (auto& t : pool) t.join();
	for (auto& e : errors)
		if (e) std::rethrow_exception(e);
}

Index samples(double seconds, double fs) {
	return static_cast<Index>(std::lround(seconds * fs));
}

} // namespace

// ---------------------------------------------------------------------------
// Data preparation

std::vector<EcgRecord> preprocess(const std::vector<EcgRecord>& records, Task task) {
	std::vector<EcgRecord> out(records.size());
	parallel_for(records.size(), thread_count(), [&](std::size_t i) {
		out[i] = task == Task::detect ? preprocess_detection(records[i]) : preprocess_classification(records[i]);
	});
	return out;
}

Tensor<float> class_target(const EcgRecord& rec, const ModelConfig& model, const TrainConfig& cfg) {
	Tensor<float> y({model.classes});
	if (model.output == OutputMode::softmax) {
		if (model.classes != 3) throw ConfigError("softmax classification predicts the 3 rhythm classes");
		if (!rec.rhythm && !rec.has_mask()) throw DataError("record '" + rec.id + "' has no rhythm label");
		y[static_cast<Index>(rec.rhythm.value_or(derive_rhythm(rec.af_mask)))] = 1.0f;
		return y;
	}
	if (static_cast<Index>(cfg.class_names.size()) != model.classes)
		throw ConfigError("class_names has " + std::to_string(cfg.class_names.size()) + " entries but the model predicts " +
				std::to_string(model.classes) + " classes");
	for (const auto& label : rec.class_labels) {
		const auto it = std::find(cfg.class_names.begin(), cfg.class_names.end(), label);
		if (it != cfg.class_names.end()) y[it - cfg.class_names.begin()] = 1.0f;
	}
	return y;
}

std::vector<Example> make_examples(const std::vector<EcgRecord>& records, const ModelConfig& model,
		const TrainConfig& cfg) {
	std::vector<Example> out;
	for (const auto& rec : records) {
		if (rec.lead_count() != model.leads)
			throw DataError("record '" + rec.id + "' has " + std::to_string(rec.lead_count()) + " leads, model expects " +
					std::to_string(model.leads));
		if (model.task == Task::detect) {
			if (!rec.has_mask()) continue;
			for (auto& seg : segment(rec, cfg.window_s, cfg.hop_s).segments) {
				Tensor<float> y({1, static_cast<Index>(seg.af_mask.size())});
				for (std::size_t i = 0; i < seg.af_mask.size(); ++i) y[static_cast<Index>(i)] = seg.af_mask[i];
				out.push_back({std::move(seg.signal), std::move(y)});
			}
		} else {
			if (model.output == OutputMode::softmax && !rec.rhythm && !rec.has_mask()) continue;
			out.push_back({center_crop(rec, cfg.crop_s).signal, class_target(rec, model, cfg)});
		}
	}
	return out;
}

std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<Example>& set,
		const std::vector<std::size_t>& order, std::size_t first, std::size_t count) {
	const Example& head = set[order[first]];
	Shape xs{static_cast<Index>(count)}, ys{static_cast<Index>(count)};
	xs.insert(xs.end(), head.x.shape().begin(), head.x.shape().end());
	ys.insert(ys.end(), head.y.shape().begin(), head.y.shape().end());
	Tensor<float> x(xs), y(ys);
	for (std::size_t b = 0; b < count; ++b) {
		const Example& e = set[order[first + b]];
		head.x.require_same_shape(e.x, "batch input");
		head.y.require_same_shape(e.y, "batch target");
		std::copy(e.x.values().begin(), e.x.values().end(), x.data() + static_cast<Index>(b) * e.x.size());
		std::copy(e.y.values().begin(), e.y.values().end(), y.data() + static_cast<Index>(b) * e.y.size());
	}
	return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

constexpr std::size_t eval_batch = 8;

std::vector<float> detect_record(Model<float>& model, const EcgRecord& rec, const TrainConfig& cfg) {
	const Index T = rec.length();
	const Index win = samples(cfg.window_s, rec.fs), hop = samples(cfg.hop_s, rec.fs);
	std::vector<Index> starts;
	if (T <= win) {
		starts.push_back(0);
	} else {
		for (Index s = 0; s + win <= T; s += hop) starts.push_back(s);
		if (starts.back() + win < T) starts.push_back(T - win);
	}
	const Index L = std::min(T, win);
	std::vector<double> sum(static_cast<std::size_t>(T), 0.0);
	std::vector<int> hits(static_cast<std::size_t>(T), 0);
	for (std::size_t first = 0; first < starts.size(); first += eval_batch) {
		const std::size_t count = std::min(eval_batch, starts.size() - first);
		Tensor<float> x({static_cast<Index>(count), rec.lead_count(), L});
		for (std::size_t b = 0; b < count; ++b)
			for (Index l = 0; l < rec.lead_count(); ++l)
				for (Index t = 0; t < L; ++t) x(static_cast<Index>(b), l, t) = rec.signal(l, starts[first + b] + t);
		const Tensor<float> p = model.predict(x);
		for (std::size_t b = 0; b < count; ++b)
			for (Index t = 0; t < L; ++t) {
				const auto k = static_cast<std::size_t>(starts[first + b] + t);
				sum[k] += p(static_cast<Index>(b), 0, t);
				++hits[k];
			}
	}
	std::vector<float> prob(static_cast<std::size_t>(T));
	for (std::size_t k = 0; k < prob.size(); ++k) prob[k] = static_cast<float>(sum[k] / hits[k]);
	return prob;
}

} // namespace

std::vector<RecordOutput> predict_records(Model<float>& model, const std::vector<EcgRecord>& records,
		const TrainConfig& cfg) {
	std::vector<RecordOutput> out(records.size());
	const bool detect = model.config().task == Task::detect;
	parallel_for(records.size(), thread_count(), [&](std::size_t i) {
		const auto& rec = records[i];
		if (rec.lead_count() != model.config().leads)
			throw DataError("record '" + rec.id + "' has " + std::to_string(rec.lead_count()) + " leads, model expects " +
					std::to_string(model.config().leads));
		out[i].id = rec.id;
		if (detect) {
			out[i].prob = detect_record(model, rec, cfg);
		} else {
			const Segment crop = center_crop(rec, cfg.crop_s);
			const Tensor<float> p = model.predict(crop.signal.reshaped({1, crop.signal.dim(0), crop.signal.dim(1)}));
			out[i].prob.assign(p.values().begin(), p.values().end());
		}
	});
	return out;
}

EvalReport evaluate(Model<float>& model, const std::vector<EcgRecord>& records, const TrainConfig& cfg) {
	const ModelConfig& mc = model.config();
	std::vector<EcgRecord> usable;
	std::vector<std::string> excluded;
	for (const auto& rec : records) {
		const bool ok = mc.task == Task::detect ? rec.has_mask()
				: mc.output == OutputMode::multilabel ? true
													  : (rec.rhythm.has_value() || rec.has_mask());
		if (ok)
			usable.push_back(rec);
		else
			excluded.push_back(rec.id);
	}
	if (usable.empty()) throw DataError("no labelled records to evaluate");
	EvalReport report = evaluate_outputs(mc, usable, predict_records(model, usable, cfg), cfg);
	report.excluded = std::move(excluded);
	return report;
}

EvalReport evaluate_outputs(const ModelConfig& mc, const std::vector<EcgRecord>& usable,
		const std::vector<RecordOutput>& outputs, const TrainConfig& cfg) {
	if (outputs.size() != usable.size()) throw UsageError("evaluate: one output per record required");
	EvalReport report;
	report.task = mc.task;

	if (mc.task == Task::detect) {
		std::vector<float> all_p, all_y;
		std::vector<int> labels, preds;
		std::vector<ScoreInput> inputs;
		for (std::size_t i = 0; i < usable.size(); ++i) {
			const auto& rec = usable[i];
			const auto& prob = outputs[i].prob;
			if (!rec.has_mask() || prob.size() != rec.af_mask.size())
				throw DataError("record '" + rec.id + "': output length does not match the annotation");
			for (std::size_t t = 0; t < prob.size(); ++t) {
				all_p.push_back(prob[t]);
				all_y.push_back(rec.af_mask[t]);
				labels.push_back(rec.af_mask[t]);
				preds.push_back(prob[t] >= 0.5f);
			}
			const Detection det = mask_to_episodes(prob, rec.r_peaks, rec.fs);
			report.predictions.push_back({rec.id, det.rhythm, det.episodes.episodes});
			ScoreInput in;
			in.id = rec.id;
			in.label = rec.rhythm.value_or(derive_rhythm(rec.af_mask));
			in.prediction = det.rhythm;
			in.predicted = det.episodes;
			in.annotated = make_episodes(mask_intervals(rec.af_mask), rec.r_peaks);
			in.r_peaks = rec.r_peaks;
			inputs.push_back(std::move(in));
		}
		report.bce = binary_cross_entropy(all_p, all_y);
		report.uar = uar(labels, preds, 2);
		Index correct = 0;
		for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == preds[i];
		report.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
		report.score = s_af(inputs);
		return report;
	}

	if (mc.output == OutputMode::softmax) {
		std::vector<int> labels, preds;
		for (std::size_t i = 0; i < usable.size(); ++i) {
			const Tensor<float> y = class_target(usable[i], mc, cfg);
			const auto& p = outputs[i].prob;
			labels.push_back(static_cast<int>(std::max_element(y.values().begin(), y.values().end()) - y.values().begin()));
			preds.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
		}
		report.uar = uar(labels, preds, static_cast<int>(mc.classes));
		Index correct = 0;
		for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == preds[i];
		report.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
	} else {
		std::vector<std::uint8_t> labels, preds;
		for (std::size_t i = 0; i < usable.size(); ++i) {
			const Tensor<float> y = class_target(usable[i], mc, cfg);
			for (Index c = 0; c < mc.classes; ++c) {
				labels.push_back(y[c] > 0.5f);
				preds.push_back(outputs[i].prob[static_cast<std::size_t>(c)] >= 0.5f);
			}
		}
		report.uar = uar_multilabel(labels, preds, mc.classes);
		Index correct = 0;
		for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == preds[i];
		report.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
	}
	return report;
}

Json EvalReport::to_json() const {
	Json j{{"task", to_string(task)}, {"uar", uar}, {"accuracy", accuracy}, {"excluded", excluded}};
	if (task == Task::detect) {
		j["bce"] = bce;
		j["s_af"] = score.s_af;
		j["score"] = hkecg::to_json(score);
	}
	return j;
}

double validation_metric(const EvalReport& r) {
	return r.task == Task::detect ? r.bce : r.accuracy;
}

bool lower_is_better(Task task) {
	return task == Task::detect;
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(Model<float>& model, const std::vector<Example>& train_set, const ValidationFn& validate,
		bool lower_better, const TrainConfig& cfg, const EpochCallback& on_epoch) {
	if (train_set.empty()) throw ConfigError("training set is empty");
	if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
	if (cfg.max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
	Rng data_rng(cfg.seed);
	Rng dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
	AdamW<float> opt(model.registry(), cfg.optimizer);
	EarlyStopping stopper(cfg.patience, lower_better);

	TrainResult result;
	std::vector<std::size_t> order(train_set.size());
	std::iota(order.begin(), order.end(), 0);
	const auto batch = static_cast<std::size_t>(cfg.batch_size);
	for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
		data_rng.shuffle(order.begin(), order.end());
		double loss_sum = 0.0;
		for (std::size_t first = 0; first < order.size(); first += batch) {
			const std::size_t count = std::min(batch, order.size() - first);
			auto [x, y] = stack_batch(train_set, order, first, count);
			Tape<float> tape;
			ForwardContext ctx{true, &dropout_rng};
			const Var<float> out = model.forward(tape, tape.constant(std::move(x)), ctx);
			const Var<float> loss = asymmetric_loss(out, y.reshaped(out.shape()), cfg.loss);
			const double value = loss.value()[0];
			if (!std::isfinite(value))
				throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
			opt.zero_grad();
			tape.backward(loss);
			opt.step();
			loss_sum += value * static_cast<double>(count);
		}
		EpochRecord rec;
		rec.epoch = epoch;
		rec.train_loss = loss_sum / static_cast<double>(order.size());
		rec.val_metric = validate(model);
		rec.lr = cfg.optimizer.lr;
		if (!std::isfinite(rec.val_metric))
			throw NumericError("non-finite validation metric at epoch " + std::to_string(epoch));
		rec.improved = stopper.update(epoch, rec.val_metric);
		if (rec.improved) result.best_state = model.state();
		result.history.push_back(rec);
		if (on_epoch) on_epoch(rec);
		if (stopper.should_stop()) break;
	}
	opt.zero_grad();
	result.best_epoch = stopper.best_epoch();
	result.best_metric = stopper.best();
	model.load_state(result.best_state);
	return result;
}

} // namespace hkecg
