#include "hkecg/backbones.hpp"

#include <array>

namespace hkecg {

std::string to_string(Backbone b) {
	switch (b) {
	case Backbone::multiscopic: return "multiscopic";
	case Backbone::resnet: return "resnet";
	case Backbone::densenet: return "densenet";
	}
	return "?";
}

std::string to_string(Task t) {
	return t == Task::detect ? "detect" : "classify";
}

std::string to_string(OutputMode m) {
	return m == OutputMode::multilabel ? "multilabel" : "softmax";
}

Backbone parse_backbone(const std::string& s) {
	if (s == "multiscopic") return Backbone::multiscopic;
	if (s == "resnet") return Backbone::resnet;
	if (s == "densenet") return Backbone::densenet;
	throw ConfigError("unknown backbone '" + s + "'");
}

Task parse_task(const std::string& s) {
	if (s == "detect") return Task::detect;
	if (s == "classify") return Task::classify;
	throw ConfigError("unknown task '" + s + "'");
}

OutputMode parse_output_mode(const std::string& s) {
	if (s == "multilabel") return OutputMode::multilabel;
	if (s == "softmax") return OutputMode::softmax;
	throw ConfigError("unknown output mode '" + s + "'");
}

Index input_channels(const ModelConfig& cfg) {
	if (cfg.leads % cfg.n == 0) return cfg.leads;
	if (cfg.n > cfg.leads) return cfg.n;
	throw ConfigError("lead count " + std::to_string(cfg.leads) + " is neither divisible by nor smaller than n=" +
			std::to_string(cfg.n));
}

ModelConfig resolve(ModelConfig cfg) {
	if (cfg.n < 1) throw ConfigError("n must be >= 1");
	if (cfg.leads < 1) throw ConfigError("lead count must be >= 1");
	if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
	const bool twelve = cfg.leads >= 12;
	switch (cfg.backbone) {
	case Backbone::multiscopic:
		if (cfg.base_width == 0) cfg.base_width = twelve ? 24 : 16;
		if (cfg.kernels.empty()) cfg.kernels = {11, 7, 5};
		if (cfg.kernels.size() != 3) throw ConfigError("multiscopic needs one kernel size per block (3)");
		break;
	case Backbone::resnet:
		if (cfg.base_width == 0) cfg.base_width = twelve ? 72 : 64;
		if (cfg.widths.empty())
			cfg.widths = twelve ? std::vector<Index>{72, 144, 288, 576} : std::vector<Index>{64, 128, 256, 512};
		if (cfg.kernels.empty()) cfg.kernels = {19, 15, 11, 7};
		if (cfg.kernels.size() != cfg.widths.size()) throw ConfigError("resnet needs one kernel per block");
		break;
	case Backbone::densenet:
		if (cfg.base_width == 0) cfg.base_width = twelve ? 72 : 64;
		if (cfg.growth == 0) cfg.growth = twelve ? 12 : 16;
		if (cfg.dense_layers == 0) cfg.dense_layers = twelve ? 6 : 4;
		if (cfg.dense_blocks < 1) throw ConfigError("densenet needs at least one dense block");
		break;
	}
	if (cfg.task == Task::detect) {
		cfg.classes = 1;
		if (cfg.head_widths.empty()) throw ConfigError("detection head needs hidden widths");
	} else if (cfg.classes < 2) {
		throw ConfigError("classification needs at least 2 classes");
	}
	input_channels(cfg);
	return cfg;
}

namespace {

template<typename Scalar>
using ModulePtr = std::unique_ptr<Module<Scalar>>;

template<typename Scalar>
ModulePtr<Scalar> conv_layer(const ModelConfig& cfg, Index d_in, Index d_out, Index k, ConvOptions opts) {
	if (cfg.dense_equivalent) return std::make_unique<Conv<Scalar>>(d_in, d_out, k, opts, false);
	if (cfg.n > 1) detail::check_ph_widths("phc", cfg.n, d_in, d_out);
	return make_conv<Scalar>(cfg.n, d_in, d_out, k, opts, false);
}

template<typename Scalar>
ModulePtr<Scalar> mix_layer(const ModelConfig& cfg, Index d_in, Index d_out) {
	if (cfg.dense_equivalent) {
		detail::check_ph_widths("phm", cfg.n, d_in, d_out);
		return std::make_unique<Dense<Scalar>>(d_in, d_out);
	}
	return make_channel_mix<Scalar>(cfg.n, d_in, d_out);
}

ConvOptions same_conv(Index k, Index dilation = 1, Index stride = 1) {
	return ConvOptions{stride, dilation, same_padding(k, dilation), 1};
}

template<typename Scalar>
void add_conv_bn_relu(Sequential<Scalar>& seq, const std::string& name, const ModelConfig& cfg, Index d_in,
		Index d_out, Index k, ConvOptions opts) {
	seq.add(name + "_conv", conv_layer<Scalar>(cfg, d_in, d_out, k, opts));
	seq.add(name + "_bn", std::make_unique<BatchNorm<Scalar>>(d_out));
	seq.add(name + "_relu", std::make_unique<ActivationLayer<Scalar>>(Activation::relu));
}

// ---------------------------------------------------------------------------
// Multi-Scopic

constexpr std::array<std::array<std::array<Index, 3>, 3>, 3> multiscopic_dilations{{
		{{{1, 0, 0}, {1, 1, 0}, {1, 1, 1}}},
		{{{2, 0, 0}, {2, 4, 0}, {8, 8, 8}}},
		{{{4, 0, 0}, {4, 8, 0}, {16, 32, 64}}},
}};

/// Three dilated branches run in parallel and concatenated on the channel axis.
template<typename Scalar>
class MultiScopic : public Module<Scalar> {
public:
	MultiScopic(const ModelConfig& cfg, Index d_in) {
		for (std::size_t branch = 0; branch < 3; ++branch) {
			auto seq = std::make_unique<Sequential<Scalar>>();
			Index width = d_in;
			for (std::size_t block = 0; block < 3; ++block) {
				const Index out = cfg.base_width << block;
				const Index k = cfg.kernels[block];
				for (std::size_t j = 0; j <= block; ++j) {
					const Index dil = multiscopic_dilations[branch][block][j];
					add_conv_bn_relu(*seq, "block" + std::to_string(block) + "." + std::to_string(j), cfg, width, out, k,
							same_conv(k, dil));
					width = out;
				}
				seq->add("block" + std::to_string(block) + ".pool", std::make_unique<Pool<Scalar>>(PoolMode::max, 2, 2));
			}
			out_width_ += width;
			branches_.push_back(std::move(seq));
		}
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		std::vector<Var<Scalar>> outs;
		for (auto& b : branches_) outs.push_back(b->forward(tape, x, ctx));
		return ops::concat_channels(outs);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		for (std::size_t i = 0; i < branches_.size(); ++i)
			branches_[i]->collect(reg, join_name(prefix, "branch" + std::to_string(i)));
	}

	std::string_view kind() const override { return "multiscopic"; }

	void init(Rng& rng) override {
		for (auto& b : branches_) b->init(rng);
	}

	Index out_width() const { return out_width_; }

private:
	std::vector<std::unique_ptr<Sequential<Scalar>>> branches_;
	Index out_width_ = 0;
};

// ---------------------------------------------------------------------------
// ResNet with separable convolutions

/**
 * Residual block: two separable convolutions (real depth-wise, PH-eligible
 * point-wise) with a stride-2 point-wise projection shortcut.
 */
template<typename Scalar>
class ResidualBlock : public Module<Scalar> {
public:
	ResidualBlock(const ModelConfig& cfg, Index d_in, Index d_out, Index k) {
		main_.add("dw0", std::make_unique<Conv<Scalar>>(d_in, d_in, k,
								 ConvOptions{2, 1, same_padding(k), d_in}, false));
		main_.add("pw0", conv_layer<Scalar>(cfg, d_in, d_out, 1, {}));
		main_.add("bn0", std::make_unique<BatchNorm<Scalar>>(d_out));
		main_.add("relu0", std::make_unique<ActivationLayer<Scalar>>(Activation::relu));
		main_.add("dw1", std::make_unique<Conv<Scalar>>(d_out, d_out, k,
								 ConvOptions{1, 1, same_padding(k), d_out}, false));
		main_.add("pw1", conv_layer<Scalar>(cfg, d_out, d_out, 1, {}));
		main_.add("bn1", std::make_unique<BatchNorm<Scalar>>(d_out));
		shortcut_.add("pw", conv_layer<Scalar>(cfg, d_in, d_out, 1, ConvOptions{2, 1, 0, 1}));
		shortcut_.add("bn", std::make_unique<BatchNorm<Scalar>>(d_out));
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		const Var<Scalar> m = main_.forward(tape, x, ctx);
		const Var<Scalar> s = shortcut_.forward(tape, x, ctx);
		return ops::relu(ops::add(m, s));
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		main_.collect(reg, join_name(prefix, "main"));
		shortcut_.collect(reg, join_name(prefix, "shortcut"));
	}

	std::string_view kind() const override { return "residual"; }

	void init(Rng& rng) override {
		main_.init(rng);
		shortcut_.init(rng);
	}

private:
	Sequential<Scalar> main_, shortcut_;
};

// ---------------------------------------------------------------------------
// DenseNet

/// BN -> ReLU -> conv producing `growth` channels, concatenated onto the input.
template<typename Scalar>
class DenseLayer : public Module<Scalar> {
public:
	DenseLayer(const ModelConfig& cfg, Index d_in, Index growth, Index k) {
		body_.add("bn", std::make_unique<BatchNorm<Scalar>>(d_in));
		body_.add("relu", std::make_unique<ActivationLayer<Scalar>>(Activation::relu));
		body_.add("conv", conv_layer<Scalar>(cfg, d_in, growth, k, same_conv(k)));
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		return ops::concat_channels(std::vector<Var<Scalar>>{x, body_.forward(tape, x, ctx)});
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override { body_.collect(reg, prefix); }
	std::string_view kind() const override { return "dense_layer"; }
	void init(Rng& rng) override { body_.init(rng); }

private:
	Sequential<Scalar> body_;
};

// ---------------------------------------------------------------------------
// Heads

template<typename Scalar>
class ClassifyHead : public Module<Scalar> {
public:
	ClassifyHead(Index features, Index classes, OutputMode mode) : fc_(features, classes), mode_(mode) { }

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		const Var<Scalar> logits = fc_.forward(tape, ops::global_pool(x, PoolMode::max), ctx);
		return mode_ == OutputMode::softmax ? ops::softmax(logits) : ops::sigmoid(logits);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override { fc_.collect(reg, join_name(prefix, "fc")); }
	std::string_view kind() const override { return "classify_head"; }
	void init(Rng& rng) override { fc_.init(rng); }

private:
	Dense<Scalar> fc_;
	OutputMode mode_;
};

template<typename Scalar>
std::unique_ptr<Sequential<Scalar>> build_detect_head(const ModelConfig& cfg, Index features) {
	auto head = std::make_unique<Sequential<Scalar>>();
	Index width = features;
	for (std::size_t i = 0; i < cfg.head_widths.size(); ++i) {
		const std::string id = std::to_string(i);
		head->add("fc" + id, mix_layer<Scalar>(cfg, width, cfg.head_widths[i]));
		head->add("mish" + id, std::make_unique<ActivationLayer<Scalar>>(Activation::mish));
		head->add("dropout" + id, std::make_unique<Dropout<Scalar>>(cfg.dropout));
		width = cfg.head_widths[i];
	}
	// A single output unit is not divisible by n > 1: the last layer stays real.
	head->add("fc_out", std::make_unique<Dense<Scalar>>(width, 1));
	head->add("sigmoid", std::make_unique<ActivationLayer<Scalar>>(Activation::sigmoid));
	return head;
}

template<typename Scalar>
std::pair<ModulePtr<Scalar>, Index> build_backbone(const ModelConfig& cfg) {
	const Index d_in = input_channels(cfg);
	switch (cfg.backbone) {
	case Backbone::multiscopic: {
		auto ms = std::make_unique<MultiScopic<Scalar>>(cfg, d_in);
		const Index w = ms->out_width();
		return {std::move(ms), w};
	}
	case Backbone::resnet: {
		auto seq = std::make_unique<Sequential<Scalar>>();
		add_conv_bn_relu(*seq, "stem", cfg, d_in, cfg.base_width, cfg.stem_kernel, same_conv(cfg.stem_kernel, 1, 2));
		Index width = cfg.base_width;
		for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
			seq->add("block" + std::to_string(i),
					std::make_unique<ResidualBlock<Scalar>>(cfg, width, cfg.widths[i], cfg.kernels[i]));
			width = cfg.widths[i];
		}
		return {std::move(seq), width};
	}
	case Backbone::densenet: {
		auto seq = std::make_unique<Sequential<Scalar>>();
		add_conv_bn_relu(*seq, "stem", cfg, d_in, cfg.base_width, cfg.stem_kernel, same_conv(cfg.stem_kernel, 1, 2));
		Index width = cfg.base_width;
		for (Index b = 0; b < cfg.dense_blocks; ++b) {
			const std::string id = std::to_string(b);
			for (Index l = 0; l < cfg.dense_layers; ++l) {
				seq->add("dense" + id + "." + std::to_string(l),
						std::make_unique<DenseLayer<Scalar>>(cfg, width, cfg.growth, cfg.dense_kernel));
				width += cfg.growth;
			}
			if (b + 1 == cfg.dense_blocks) break;
			const Index compressed = round_to_multiple(0.5 * static_cast<double>(width), cfg.n);
			seq->add("transition" + id + ".bn", std::make_unique<BatchNorm<Scalar>>(width));
			seq->add("transition" + id + ".relu", std::make_unique<ActivationLayer<Scalar>>(Activation::relu));
			seq->add("transition" + id + ".conv", conv_layer<Scalar>(cfg, width, compressed, 1, {}));
			seq->add("transition" + id + ".pool", std::make_unique<Pool<Scalar>>(PoolMode::avg, 2, 2));
			width = compressed;
		}
		return {std::move(seq), width};
	}
	}
	throw ConfigError("unknown backbone");
}

template<typename Scalar>
void copy_layer(Module<Scalar>& src, Module<Scalar>& dst) {
	if (auto* phm = dynamic_cast<PHM<Scalar>*>(&src)) {
		auto& d = dynamic_cast<Dense<Scalar>&>(dst);
		d.weight().value = phm->build_weight();
		if (phm->bias()) d.bias()->value = phm->bias()->value;
		return;
	}
	if (auto* phc = dynamic_cast<PHC<Scalar>*>(&src)) {
		auto& d = dynamic_cast<Conv<Scalar>&>(dst);
		d.weight().value = phc->build_weight();
		if (phc->bias()) d.bias()->value = phc->bias()->value;
		return;
	}
	Registry<Scalar> a, b;
	src.collect(a, "");
	dst.collect(b, "");
	if (a.parameters.size() != b.parameters.size() || a.buffers.size() != b.buffers.size())
		throw std::logic_error("densify: layer structure mismatch");
	for (std::size_t i = 0; i < a.parameters.size(); ++i) b.parameters[i].param->value = a.parameters[i].param->value;
	for (std::size_t i = 0; i < a.buffers.size(); ++i) *b.buffers[i].buffer = *a.buffers[i].buffer;
}

} // namespace

template<typename Scalar>
Model<Scalar>::Model(const ModelConfig& cfg) : cfg_(resolve(cfg)) {
	auto [backbone, width] = build_backbone<Scalar>(cfg_);
	backbone_ = std::move(backbone);
	feature_width_ = width;
	se_ = std::make_unique<SEBlock<Scalar>>(cfg_.n, width, cfg_.se_reduction, cfg_.dense_equivalent);
	if (cfg_.task == Task::detect)
		head_ = build_detect_head<Scalar>(cfg_, width);
	else
		head_ = std::make_unique<ClassifyHead<Scalar>>(width, cfg_.classes, cfg_.output);
	init(cfg_.seed);
}

template<typename Scalar>
Model<Scalar>::~Model() = default;

template<typename Scalar>
Var<Scalar> Model<Scalar>::forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) {
	const Shape shape = x.shape();
	if (shape.size() != 3 || shape[1] != cfg_.leads)
		throw ShapeError("model expects b x " + std::to_string(cfg_.leads) + " x t input, got " + shape_str(shape));
	Var<Scalar> h = x;
	const Index channels = input_channels(cfg_);
	if (channels > cfg_.leads) h = ops::pad_channels(h, channels);
	h = backbone_->forward(tape, h, ctx);
	h = se_->forward(tape, h, ctx);
	h = head_->forward(tape, h, ctx);
	if (cfg_.task == Task::detect) h = ops::interpolate(h, shape[2]);
	return h;
}

template<typename Scalar>
Tensor<Scalar> Model<Scalar>::predict(const Tensor<Scalar>& batch) {
	Tape<Scalar> tape;
	tape.set_grad_enabled(false);
	ForwardContext ctx{false, nullptr};
	return forward(tape, tape.constant(batch), ctx).value();
}

template<typename Scalar>
Tensor<Scalar> Model<Scalar>::features(const Tensor<Scalar>& batch) {
	Tape<Scalar> tape;
	tape.set_grad_enabled(false);
	ForwardContext ctx{false, nullptr};
	Var<Scalar> h = tape.constant(batch);
	const Index channels = input_channels(cfg_);
	if (channels > cfg_.leads) h = ops::pad_channels(h, channels);
	return backbone_->forward(tape, h, ctx).value();
}

template<typename Scalar>
void Model<Scalar>::init(std::uint64_t seed) {
	Rng rng(seed);
	backbone_->init(rng);
	se_->init(rng);
	head_->init(rng);
}

template<typename Scalar>
Registry<Scalar> Model<Scalar>::registry() {
	Registry<Scalar> reg;
	backbone_->collect(reg, "cnn");
	se_->collect(reg, "se");
	head_->collect(reg, "head");
	return reg;
}

template<typename Scalar>
ParamReport Model<Scalar>::param_report() {
	ParamReport r;
	r.cnn = param_count(*backbone_);
	r.se = param_count<Scalar>(*se_);
	r.head = param_count(*head_);
	r.total = r.cnn + r.se + r.head;
	return r;
}

template<typename Scalar>
Index Model<Scalar>::ph_layer_count() {
	Index count = 0;
	for (const auto& l : registry().layers)
		if (l.layer->is_ph()) ++count;
	return count;
}

template<typename Scalar>
ModelState<Scalar> Model<Scalar>::state() {
	ModelState<Scalar> s;
	auto reg = registry();
	for (const auto& p : reg.parameters) s.parameters.push_back(p.param->value);
	for (const auto& b : reg.buffers) s.buffers.push_back(*b.buffer);
	return s;
}

template<typename Scalar>
void Model<Scalar>::load_state(const ModelState<Scalar>& s) {
	auto reg = registry();
	if (s.parameters.size() != reg.parameters.size() || s.buffers.size() != reg.buffers.size())
		throw ShapeError("model state does not match the architecture");
	for (std::size_t i = 0; i < s.parameters.size(); ++i) {
		reg.parameters[i].param->value.require_same_shape(s.parameters[i], reg.parameters[i].name.c_str());
		reg.parameters[i].param->value = s.parameters[i];
	}
	for (std::size_t i = 0; i < s.buffers.size(); ++i) {
		reg.buffers[i].buffer->require_same_shape(s.buffers[i], reg.buffers[i].name.c_str());
		*reg.buffers[i].buffer = s.buffers[i];
	}
}

template<typename Scalar>
void Model<Scalar>::zero_grad() {
	for (auto& p : registry().parameters) p.param->zero_grad();
}

template<typename Scalar>
Model<Scalar> densify(Model<Scalar>& model) {
	ModelConfig cfg = model.config();
	cfg.dense_equivalent = true;
	Model<Scalar> out(cfg);
	auto src = model.registry();
	auto dst = out.registry();
	if (src.layers.size() != dst.layers.size()) throw std::logic_error("densify: layer count mismatch");
	for (std::size_t i = 0; i < src.layers.size(); ++i) copy_layer(*src.layers[i].layer, *dst.layers[i].layer);
	return out;
}

ParamReport real_baseline_report(const ModelConfig& cfg) {
	ModelConfig real = cfg;
	real.n = 1;
	real.dense_equivalent = false;
	return Model<float>(real).param_report();
}

template class Model<float>;
template class Model<double>;
template Model<float> densify(Model<float>&);
template Model<double> densify(Model<double>&);

} // namespace hkecg
