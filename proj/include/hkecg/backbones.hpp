#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "hkecg/autodiff.hpp"
#include "hkecg/layers.hpp"

namespace hkecg {

enum class Backbone { multiscopic, resnet, densenet };
enum class Task { detect, classify };
enum class OutputMode { multilabel, softmax };

std::string to_string(Backbone b);
std::string to_string(Task t);
std::string to_string(OutputMode m);
Backbone parse_backbone(const std::string& s);
Task parse_task(const std::string& s);
OutputMode parse_output_mode(const std::string& s);

/**
 * Architecture description. Zero or empty hyperparameters take the default
 * for the lead count (2-lead or 12-lead plan) when resolved.
 */
struct ModelConfig {
	Backbone backbone = Backbone::multiscopic;
	Index n = 1;
	Index leads = 2;
	Task task = Task::detect;
	Index classes = 1;
	OutputMode output = OutputMode::multilabel;
	double dropout = 0.2;
	std::uint64_t seed = 0;

	// Multi-Scopic: width of the first block; ResNet / DenseNet: stem filters.
	Index base_width = 0;
	// Multi-Scopic: kernel per block; ResNet: kernel per residual block.
	std::vector<Index> kernels;
	// ResNet block output widths.
	std::vector<Index> widths;
	Index stem_kernel = 15;
	Index growth = 0;
	Index dense_layers = 0;
	Index dense_blocks = 4;
	Index dense_kernel = 15;
	std::vector<Index> head_widths{256, 64};
	Index se_reduction = 8;

	// Build PH-eligible layers as real layers of identical shape (used to
	// compare against the materialised weights); not serialised.
	bool dense_equivalent = false;

	bool operator==(const ModelConfig&) const = default;
};

/// Fills defaults and validates; throws ConfigError.
ModelConfig resolve(ModelConfig cfg);

/// Channel count fed to the stem: leads, zero-padded up to n when n does not divide it.
Index input_channels(const ModelConfig& cfg);

struct ParamReport {
	Index cnn = 0;
	Index se = 0;
	Index head = 0;
	Index total = 0;
};

/// Parameter and buffer values in registry order.
template<typename Scalar>
struct ModelState {
	std::vector<Tensor<Scalar>> parameters;
	std::vector<Tensor<Scalar>> buffers;
	bool operator==(const ModelState&) const = default;
};

/**
 * CNN backbone, one SE block and a task head. Input is b x leads x t;
 * detection output is b x 1 x t of AF probabilities, classification output
 * is b x classes.
 */
template<typename Scalar>
class Model {
public:
	explicit Model(const ModelConfig& cfg);
	Model(const Model&) = delete;
	Model& operator=(const Model&) = delete;
	Model(Model&&) noexcept = default;
	Model& operator=(Model&&) noexcept = default;
	~Model();

	const ModelConfig& config() const { return cfg_; }

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx);

	/// Eval-mode forward without gradient recording.
	Tensor<Scalar> predict(const Tensor<Scalar>& batch);

	/// Backbone output (before SE) for an eval-mode batch.
	Tensor<Scalar> features(const Tensor<Scalar>& batch);

	/// Re-initialises every layer from `seed`.
	void init(std::uint64_t seed);

	Registry<Scalar> registry();
	ParamReport param_report();
	Index ph_layer_count();
	Index feature_width() const { return feature_width_; }

	Module<Scalar>& backbone() { return *backbone_; }
	SEBlock<Scalar>& se() { return *se_; }
	Module<Scalar>& head() { return *head_; }

	ModelState<Scalar> state();
	void load_state(const ModelState<Scalar>& s);
	void zero_grad();

private:
	ModelConfig cfg_;
	std::unique_ptr<Module<Scalar>> backbone_;
	std::unique_ptr<SEBlock<Scalar>> se_;
	std::unique_ptr<Module<Scalar>> head_;
	Index feature_width_ = 0;
};

template<typename Scalar>
Model<Scalar> build_multiscopic(ModelConfig cfg) {
	cfg.backbone = Backbone::multiscopic;
	return Model<Scalar>(cfg);
}
template<typename Scalar>
Model<Scalar> build_resnet(ModelConfig cfg) {
	cfg.backbone = Backbone::resnet;
	return Model<Scalar>(cfg);
}
template<typename Scalar>
Model<Scalar> build_densenet(ModelConfig cfg) {
	cfg.backbone = Backbone::densenet;
	return Model<Scalar>(cfg);
}

/**
 * Copy of `model` in which every PHM/PHC layer is replaced by a real layer
 * holding its materialised weight; all other values are copied.
 */
template<typename Scalar>
Model<Scalar> densify(Model<Scalar>& model);

/// Parameter report of the n = 1 build of the same configuration.
ParamReport real_baseline_report(const ModelConfig& cfg);

extern template class Model<float>;
extern template class Model<double>;
extern template Model<float> densify(Model<float>&);
extern template Model<double> densify(Model<double>&);

} // namespace hkecg
