#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hkecg/autodiff.hpp"
#include "hkecg/backbones.hpp"
#include "hkecg/ecgdata.hpp"
#include "hkecg/errors.hpp"
#include "hkecg/metrics.hpp"

namespace hkecg {

// ---------------------------------------------------------------------------
// Asymmetric loss

struct AslParams {
	double gamma_pos = 0.0;
	double gamma_neg = 4.0;
	double margin = 0.05;
};

namespace detail {

constexpr double prob_floor = 1e-7;

/// Loss terms and their derivative in p for one element with target y in [0, 1].
inline std::pair<double, double> asl_element(double p, double y, const AslParams& a) {
	const bool clamped = p < prob_floor || p > 1.0 - prob_floor;
	const double pc = std::clamp(p, prob_floor, 1.0 - prob_floor);
	double loss = 0.0, grad = 0.0;
	if (y > 0.0) {
		const double q = 1.0 - pc;
		const double focus = a.gamma_pos == 0.0 ? 1.0 : std::pow(q, a.gamma_pos);
		loss += -y * focus * std::log(pc);
		double d = -focus / pc;
		if (a.gamma_pos != 0.0) d += a.gamma_pos * std::pow(q, a.gamma_pos - 1.0) * std::log(pc);
		grad += y * d;
	}
	if (y < 1.0) {
		const double pm = std::max(pc - a.margin, 0.0);
		if (pm > 0.0) {
			const double focus = a.gamma_neg == 0.0 ? 1.0 : std::pow(pm, a.gamma_neg);
			loss += -(1.0 - y) * focus * std::log(1.0 - pm);
			double d = focus / (1.0 - pm);
			if (a.gamma_neg != 0.0) d -= a.gamma_neg * std::pow(pm, a.gamma_neg - 1.0) * std::log(1.0 - pm);
			grad += (1.0 - y) * d;
		}
	}
	return {loss, clamped ? 0.0 : grad};
}

} // namespace detail

/**
 * Mean asymmetric loss of probabilities `p` against targets `y` (same shape).
 * Positives: -(1-p)^γ+ log p. Negatives: -p_m^γ- log(1-p_m), p_m = max(p - margin, 0).
 */
template<typename Scalar>
Var<Scalar> asymmetric_loss(const Var<Scalar>& p, const Tensor<Scalar>& y, const AslParams& params = {}) {
	p.value().require_same_shape(y, "asymmetric_loss");
	const Index count = y.size();
	double total = 0.0;
	Tensor<Scalar> dp(y.shape());
	for (Index i = 0; i < count; ++i) {
		const auto [l, d] = detail::asl_element(static_cast<double>(p.value()[i]), static_cast<double>(y[i]), params);
		total += l;
		dp[i] = static_cast<Scalar>(d / static_cast<double>(count));
	}
	return p.tape()->record("asymmetric_loss", Tensor<Scalar>::scalar(static_cast<Scalar>(total / count)), {p},
			[dp = std::move(dp)](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index i = 0; i < dp.size(); ++i) (*gin[0])[i] += g[0] * dp[i];
			});
}

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
double binary_cross_entropy(std::span<const float> p, std::span<const float> y);

// ---------------------------------------------------------------------------
// Optimiser

struct AdamWConfig {
	double lr = 1e-4;
	double beta1 = 0.9;
	double beta2 = 0.999;
	double eps = 1e-8;
	double weight_decay = 0.0;
};

/**
 * AdamW with the AMSGrad running maximum of the second moment. Weight decay
 * is decoupled: θ ← θ(1 - lr·λ) before the adaptive step.
 */
template<typename Scalar>
class AdamW {
public:
	struct Slot {
		std::string name;
		Parameter<Scalar>* param;
		Tensor<Scalar> m, v, v_max;
	};

	AdamW(const Registry<Scalar>& reg, AdamWConfig cfg) : cfg_(cfg) {
		for (const auto& p : reg.parameters) add(p.name, *p.param);
	}
	explicit AdamW(AdamWConfig cfg) : cfg_(cfg) { }

	void add(const std::string& name, Parameter<Scalar>& p) {
		slots_.push_back({name, &p, Tensor<Scalar>(p.shape()), Tensor<Scalar>(p.shape()), Tensor<Scalar>(p.shape())});
	}

	/// One update from each parameter's accumulated gradient (absent gradient counts as zero).
	void step() {
		for (const auto& s : slots_) {
			if (!s.param->grad) continue;
			for (Scalar g : s.param->grad->values())
				if (!std::isfinite(static_cast<double>(g)))
					throw NumericError("non-finite gradient in parameter '" + s.name + "'");
		}
		++t_;
		const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
		const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
		const double step_size = cfg_.lr / bc1;
		const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
		for (auto& s : slots_) {
			auto& theta = s.param->value;
			const Tensor<Scalar>* grad = s.param->grad ? &*s.param->grad : nullptr;
			for (Index i = 0; i < theta.size(); ++i) {
				const double g = grad ? static_cast<double>((*grad)[i]) : 0.0;
				const double m = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
				const double v = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
				s.m[i] = static_cast<Scalar>(m);
				s.v[i] = static_cast<Scalar>(v);
				s.v_max[i] = std::max(s.v_max[i], s.v[i]);
				const double denom = std::sqrt(static_cast<double>(s.v_max[i])) / std::sqrt(bc2) + cfg_.eps;
				theta[i] = static_cast<Scalar>(theta[i] * decay - step_size * m / denom);
			}
		}
	}

	void zero_grad() {
		for (auto& s : slots_) s.param->zero_grad();
	}

	std::int64_t step_count() const { return t_; }
	const std::vector<Slot>& slots() const { return slots_; }
	const AdamWConfig& config() const { return cfg_; }

private:
	AdamWConfig cfg_;
	std::vector<Slot> slots_;
	std::int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Early stopping

class EarlyStopping {
public:
	EarlyStopping(int patience, bool lower_is_better) : patience_(patience), lower_(lower_is_better) {
		if (patience < 1) throw ConfigError("patience must be >= 1");
	}

	/// Records the metric of `epoch`; returns true when it is a new best.
	bool update(int epoch, double metric) {
		const bool better = best_epoch_ < 0 || (lower_ ? metric < best_ : metric > best_);
		if (better) {
			best_ = metric;
			best_epoch_ = epoch;
			bad_ = 0;
		} else {
			++bad_;
		}
		return better;
	}

	bool should_stop() const { return bad_ >= patience_; }
	int best_epoch() const { return best_epoch_; }
	double best() const { return best_; }

private:
	int patience_;
	bool lower_;
	int best_epoch_ = -1;
	double best_ = 0.0;
	int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Data preparation

struct TrainConfig {
	Index batch_size = 64;
	int max_epochs = 50;
	int patience = 10;
	AdamWConfig optimizer;
	AslParams loss;
	std::uint64_t seed = 0;
	double window_s = 30.0;
	double hop_s = 15.0;
	double crop_s = 10.0;
	/// Label vocabulary of multi-label classification.
	std::vector<std::string> class_names{"NSR", "AF", "I-AVB", "LBBB", "RBBB", "PAC"};
};

/// One model input (leads x L) with its target (1 x L per-sample mask, or class vector).
struct Example {
	Tensor<float> x;
	Tensor<float> y;
};

/// Preprocesses every record for the model's task (band-pass + z-score, or z-score only).
std::vector<EcgRecord> preprocess(const std::vector<EcgRecord>& records, Task task);

/// Training examples from preprocessed records: detection windows, or centre crops with class targets.
std::vector<Example> make_examples(const std::vector<EcgRecord>& records, const ModelConfig& model,
		const TrainConfig& cfg);

/// Class target of a record for classification (multi-hot names or one-hot rhythm).
Tensor<float> class_target(const EcgRecord& rec, const ModelConfig& model, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation

struct RecordOutput {
	std::string id;
	std::vector<float> prob; // per sample (detection) or per class
};

/**
 * Detection probabilities for whole records: overlapping windows are run in
 * eval mode and averaged per sample; a tail not covered by the regular
 * windows gets one extra end-aligned window.
 */
std::vector<RecordOutput> predict_records(Model<float>& model, const std::vector<EcgRecord>& records,
		const TrainConfig& cfg);

struct EvalReport {
	Task task = Task::detect;
	double bce = 0.0;      // detection
	double uar = 0.0;      // per-sample (detection) or per-class (classification)
	double accuracy = 0.0; // classification; per-sample for detection
	ScoreBreakdown score;  // detection
	std::vector<RecordPrediction> predictions;
	std::vector<std::string> excluded; // records without usable labels
	nlohmann::json to_json() const;
};

/// Scores `records` (already preprocessed) with the model in eval mode.
EvalReport evaluate(Model<float>& model, const std::vector<EcgRecord>& records, const TrainConfig& cfg);

/// Scores precomputed outputs of labelled records (one output per record, same order).
EvalReport evaluate_outputs(const ModelConfig& model, const std::vector<EcgRecord>& records,
		const std::vector<RecordOutput>& outputs, const TrainConfig& cfg);

/// Early-stopping metric: BCE (detection) or accuracy (classification).
double validation_metric(const EvalReport& r);
bool lower_is_better(Task task);

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
	int epoch = 0;
	double train_loss = 0.0;
	double val_metric = 0.0;
	double lr = 0.0;
	bool improved = false;
};

struct TrainResult {
	std::vector<EpochRecord> history;
	int best_epoch = 0;
	double best_metric = 0.0;
	ModelState<float> best_state;
};

using ValidationFn = std::function<double(Model<float>&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

/**
 * Seeded mini-batch training with early stopping on `validate`. On return
 * the model holds the best epoch's weights and batch-norm statistics.
 */
TrainResult train(Model<float>& model, const std::vector<Example>& train_set, const ValidationFn& validate,
		bool lower_better, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Stacks examples [first, first + count) of `order` into a batch.
std::pair<Tensor<float>, Tensor<float>> stack_batch(const std::vector<Example>& set,
		const std::vector<std::size_t>& order, std::size_t first, std::size_t count);

/// Worker count from HK_THREADS (default 1).
int thread_count();

} // namespace hkecg
