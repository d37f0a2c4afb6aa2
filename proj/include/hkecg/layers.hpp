#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hkecg/autodiff.hpp"
#include "hkecg/errors.hpp"
#include "hkecg/rng.hpp"
#include "hkecg/tensor.hpp"

namespace hkecg {

/// Per-call state threaded through a forward pass.
struct ForwardContext {
	bool training = false;
	Rng* rng = nullptr;
};

template<typename Scalar>
class Module;

/// Flat, ordered view of a module tree's parameters, buffers and leaf layers.
template<typename Scalar>
struct Registry {
	struct NamedParameter {
		std::string name;
		Parameter<Scalar>* param;
	};
	struct NamedBuffer {
		std::string name;
		Tensor<Scalar>* buffer;
	};
	struct NamedLayer {
		std::string name;
		Module<Scalar>* layer;
	};

	std::vector<NamedParameter> parameters;
	std::vector<NamedBuffer> buffers;
	std::vector<NamedLayer> layers;

	Index parameter_count() const {
		Index n = 0;
		for (const auto& p : parameters) n += p.param->size();
		return n;
	}
};

inline std::string join_name(const std::string& prefix, std::string_view leaf) {
	return prefix.empty() ? std::string(leaf) : prefix + "." + std::string(leaf);
}

template<typename Scalar>
class Module {
public:
	virtual ~Module() = default;

	virtual Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) = 0;

	/// Appends this module's parameters, buffers and leaf layers under `prefix`.
	virtual void collect(Registry<Scalar>& reg, const std::string& prefix) = 0;

	/// Layer type tag: "fc", "phm", "conv", "phc", "batchnorm" for leaves.
	virtual std::string_view kind() const = 0;

	/// Re-draws parameters: He-normal weights, zero biases.
	virtual void init(Rng& rng) = 0;

	virtual bool is_ph() const { return false; }
};

// ---------------------------------------------------------------------------
// Real-valued layers

template<typename Scalar>
class Dense : public Module<Scalar> {
public:
	Dense(Index d_in, Index d_out, bool with_bias = true)
		: d_in_(d_in), d_out_(d_out), weight_(Tensor<Scalar>({d_out, d_in})) {
		if (d_in < 1 || d_out < 1) throw ConfigError("fc: widths must be positive");
		if (with_bias) bias_.emplace(Tensor<Scalar>({d_out}));
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext&) override {
		std::optional<Var<Scalar>> b;
		if (bias_) b = tape.parameter(*bias_);
		return ops::linear(x, tape.parameter(weight_), b);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reg.layers.push_back({prefix, this});
		reg.parameters.push_back({join_name(prefix, "weight"), &weight_});
		if (bias_) reg.parameters.push_back({join_name(prefix, "bias"), &*bias_});
	}

	std::string_view kind() const override { return "fc"; }

	void init(Rng& rng) override {
		const double std = std::sqrt(2.0 / static_cast<double>(d_in_));
		for (auto& w : weight_.value.values()) w = static_cast<Scalar>(rng.normal(0.0, std));
		if (bias_) bias_->value.fill(0);
	}

	Index d_in() const { return d_in_; }
	Index d_out() const { return d_out_; }
	Parameter<Scalar>& weight() { return weight_; }
	Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }

private:
	Index d_in_, d_out_;
	Parameter<Scalar> weight_;
	std::optional<Parameter<Scalar>> bias_;
};

template<typename Scalar>
class Conv : public Module<Scalar> {
public:
	Conv(Index d_in, Index d_out, Index kernel, ConvOptions opts = {}, bool with_bias = true)
		: d_in_(d_in), d_out_(d_out), kernel_(kernel), opts_(opts) {
		if (d_in < 1 || d_out < 1 || kernel < 1) throw ConfigError("conv: widths and kernel must be positive");
		if (opts.groups < 1 || d_in % opts.groups || d_out % opts.groups)
			throw ConfigError("conv: channels " + std::to_string(d_in) + "->" + std::to_string(d_out) +
					" not divisible by groups " + std::to_string(opts.groups));
		weight_.value = Tensor<Scalar>({d_out, d_in / opts.groups, kernel});
		if (with_bias) bias_.emplace(Tensor<Scalar>({d_out}));
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext&) override {
		std::optional<Var<Scalar>> b;
		if (bias_) b = tape.parameter(*bias_);
		return ops::conv1d(x, tape.parameter(weight_), b, opts_);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reg.layers.push_back({prefix, this});
		reg.parameters.push_back({join_name(prefix, "weight"), &weight_});
		if (bias_) reg.parameters.push_back({join_name(prefix, "bias"), &*bias_});
	}

	std::string_view kind() const override { return "conv"; }

	void init(Rng& rng) override {
		const double std = std::sqrt(2.0 / static_cast<double>(d_in_ / opts_.groups * kernel_));
		for (auto& w : weight_.value.values()) w = static_cast<Scalar>(rng.normal(0.0, std));
		if (bias_) bias_->value.fill(0);
	}

	Index d_in() const { return d_in_; }
	Index d_out() const { return d_out_; }
	Index kernel() const { return kernel_; }
	const ConvOptions& options() const { return opts_; }
	Parameter<Scalar>& weight() { return weight_; }
	Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }

private:
	Index d_in_, d_out_, kernel_;
	ConvOptions opts_;
	Parameter<Scalar> weight_;
	std::optional<Parameter<Scalar>> bias_;
};

// ---------------------------------------------------------------------------
// Parameterised hypercomplex layers

namespace detail {

inline void check_ph_widths(std::string_view what, Index n, Index d_in, Index d_out) {
	if (n < 1) throw ConfigError(std::string(what) + ": n must be >= 1");
	if (d_in % n != 0 || d_out % n != 0)
		throw ConfigError(std::string(what) + ": widths " + std::to_string(d_in) + "->" + std::to_string(d_out) +
				" must be divisible by n=" + std::to_string(n));
}

template<typename Scalar>
void init_algebra(Parameter<Scalar>& factors, Rng& rng) {
	for (auto& v : factors.value.values()) v = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
}

} // namespace detail

/**
 * Parameterised hypercomplex multiplication. The d_out x d_in weight is the
 * sum of n Kronecker products of learnt n x n algebra matrices with learnt
 * (d_out/n) x (d_in/n) blocks, and is rebuilt from the factors on every call.
 */
template<typename Scalar>
class PHM : public Module<Scalar> {
public:
	PHM(Index n, Index d_in, Index d_out, bool with_bias = true) : n_(n), d_in_(d_in), d_out_(d_out) {
		detail::check_ph_widths("phm", n, d_in, d_out);
		algebra_.value = Tensor<Scalar>({n, n, n});
		blocks_.value = Tensor<Scalar>({n, d_out / n, d_in / n});
		if (with_bias) bias_.emplace(Tensor<Scalar>({d_out}));
	}

	/// Materialised weight H (d_out x d_in).
	Tensor<Scalar> build_weight() const { return ops::kron_sum_value(algebra_.value, blocks_.value); }

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext&) override {
		const Var<Scalar> h = ops::kron_sum(tape.parameter(algebra_), tape.parameter(blocks_));
		std::optional<Var<Scalar>> b;
		if (bias_) b = tape.parameter(*bias_);
		return ops::linear(x, h, b);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reg.layers.push_back({prefix, this});
		reg.parameters.push_back({join_name(prefix, "algebra"), &algebra_});
		reg.parameters.push_back({join_name(prefix, "blocks"), &blocks_});
		if (bias_) reg.parameters.push_back({join_name(prefix, "bias"), &*bias_});
	}

	std::string_view kind() const override { return "phm"; }
	bool is_ph() const override { return true; }

	void init(Rng& rng) override {
		detail::init_algebra(algebra_, rng);
		const double std = std::sqrt(2.0 / static_cast<double>(d_in_));
		for (auto& w : blocks_.value.values()) w = static_cast<Scalar>(rng.normal(0.0, std));
		if (bias_) bias_->value.fill(0);
	}

	Index n() const { return n_; }
	Index d_in() const { return d_in_; }
	Index d_out() const { return d_out_; }
	Parameter<Scalar>& algebra() { return algebra_; }
	Parameter<Scalar>& blocks() { return blocks_; }
	Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }

private:
	Index n_, d_in_, d_out_;
	Parameter<Scalar> algebra_;
	Parameter<Scalar> blocks_;
	std::optional<Parameter<Scalar>> bias_;
};

/// Parameterised hypercomplex convolution; H is d_out x d_in x k built from n x n algebra matrices and filter banks.
template<typename Scalar>
class PHC : public Module<Scalar> {
public:
	PHC(Index n, Index d_in, Index d_out, Index kernel, ConvOptions opts = {}, bool with_bias = true)
		: n_(n), d_in_(d_in), d_out_(d_out), kernel_(kernel), opts_(opts) {
		detail::check_ph_widths("phc", n, d_in, d_out);
		if (kernel < 1) throw ConfigError("phc: kernel must be positive");
		if (opts.groups != 1) throw ConfigError("phc: grouped convolutions stay real-valued");
		algebra_.value = Tensor<Scalar>({n, n, n});
		filters_.value = Tensor<Scalar>({n, d_out / n, d_in / n, kernel});
		if (with_bias) bias_.emplace(Tensor<Scalar>({d_out}));
	}

	Tensor<Scalar> build_weight() const { return ops::kron_sum_value(algebra_.value, filters_.value); }

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext&) override {
		const Var<Scalar> h = ops::kron_sum(tape.parameter(algebra_), tape.parameter(filters_));
		std::optional<Var<Scalar>> b;
		if (bias_) b = tape.parameter(*bias_);
		return ops::conv1d(x, h, b, opts_);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reg.layers.push_back({prefix, this});
		reg.parameters.push_back({join_name(prefix, "algebra"), &algebra_});
		reg.parameters.push_back({join_name(prefix, "filters"), &filters_});
		if (bias_) reg.parameters.push_back({join_name(prefix, "bias"), &*bias_});
	}

	std::string_view kind() const override { return "phc"; }
	bool is_ph() const override { return true; }

	void init(Rng& rng) override {
		detail::init_algebra(algebra_, rng);
		const double std = std::sqrt(2.0 / static_cast<double>(d_in_ * kernel_));
		for (auto& w : filters_.value.values()) w = static_cast<Scalar>(rng.normal(0.0, std));
		if (bias_) bias_->value.fill(0);
	}

	Index n() const { return n_; }
	Index d_in() const { return d_in_; }
	Index d_out() const { return d_out_; }
	Index kernel() const { return kernel_; }
	const ConvOptions& options() const { return opts_; }
	Parameter<Scalar>& algebra() { return algebra_; }
	Parameter<Scalar>& filters() { return filters_; }
	Parameter<Scalar>* bias() { return bias_ ? &*bias_ : nullptr; }

private:
	Index n_, d_in_, d_out_, kernel_;
	ConvOptions opts_;
	Parameter<Scalar> algebra_;
	Parameter<Scalar> filters_;
	std::optional<Parameter<Scalar>> bias_;
};

// ---------------------------------------------------------------------------
// Normalisation

template<typename Scalar>
class BatchNorm : public Module<Scalar> {
public:
	static constexpr double momentum = 0.1;
	static constexpr double epsilon = 1e-5;

	explicit BatchNorm(Index channels)
		: gamma_(Tensor<Scalar>({channels}, Scalar(1))), beta_(Tensor<Scalar>({channels})),
		  running_mean_({channels}), running_var_({channels}, Scalar(1)) { }

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		return ops::batch_norm(x, tape.parameter(gamma_), tape.parameter(beta_), running_mean_, running_var_,
				ctx.training, static_cast<Scalar>(momentum), static_cast<Scalar>(epsilon));
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reg.layers.push_back({prefix, this});
		reg.parameters.push_back({join_name(prefix, "gamma"), &gamma_});
		reg.parameters.push_back({join_name(prefix, "beta"), &beta_});
		reg.buffers.push_back({join_name(prefix, "running_mean"), &running_mean_});
		reg.buffers.push_back({join_name(prefix, "running_var"), &running_var_});
	}

	std::string_view kind() const override { return "batchnorm"; }

	void init(Rng&) override {
		gamma_.value.fill(1);
		beta_.value.fill(0);
		running_mean_.fill(0);
		running_var_.fill(1);
	}

	Parameter<Scalar>& gamma() { return gamma_; }
	Parameter<Scalar>& beta() { return beta_; }
	Tensor<Scalar>& running_mean() { return running_mean_; }
	Tensor<Scalar>& running_var() { return running_var_; }

private:
	Parameter<Scalar> gamma_, beta_;
	Tensor<Scalar> running_mean_, running_var_;
};

// ---------------------------------------------------------------------------
// Stateless layers and containers

template<typename Scalar>
class ActivationLayer : public Module<Scalar> {
public:
	explicit ActivationLayer(Activation kind) : kind_(kind) { }
	Var<Scalar> forward(Tape<Scalar>&, const Var<Scalar>& x, ForwardContext&) override {
		return ops::activation(x, kind_);
	}
	void collect(Registry<Scalar>&, const std::string&) override { }
	std::string_view kind() const override { return "activation"; }
	void init(Rng&) override { }

private:
	Activation kind_;
};

template<typename Scalar>
class Pool : public Module<Scalar> {
public:
	Pool(PoolMode mode, Index kernel, Index stride) : mode_(mode), kernel_(kernel), stride_(stride) { }
	Var<Scalar> forward(Tape<Scalar>&, const Var<Scalar>& x, ForwardContext&) override {
		return ops::pool1d(x, mode_, kernel_, stride_);
	}
	void collect(Registry<Scalar>&, const std::string&) override { }
	std::string_view kind() const override { return "pool"; }
	void init(Rng&) override { }

private:
	PoolMode mode_;
	Index kernel_, stride_;
};

template<typename Scalar>
class Dropout : public Module<Scalar> {
public:
	explicit Dropout(double p) : p_(p) {
		if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
	}
	Var<Scalar> forward(Tape<Scalar>&, const Var<Scalar>& x, ForwardContext& ctx) override {
		if (!ctx.training || p_ == 0.0) return x;
		if (!ctx.rng) throw UsageError("dropout in training mode needs an rng");
		return ops::dropout(x, p_, true, *ctx.rng);
	}
	void collect(Registry<Scalar>&, const std::string&) override { }
	std::string_view kind() const override { return "dropout"; }
	void init(Rng&) override { }

private:
	double p_;
};

template<typename Scalar>
class Sequential : public Module<Scalar> {
public:
	Sequential& add(std::string name, std::unique_ptr<Module<Scalar>> m) {
		children_.push_back({std::move(name), std::move(m)});
		return *this;
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		Var<Scalar> h = x;
		for (auto& c : children_) h = c.module->forward(tape, h, ctx);
		return h;
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		for (auto& c : children_) c.module->collect(reg, join_name(prefix, c.name));
	}

	std::string_view kind() const override { return "sequential"; }

	void init(Rng& rng) override {
		for (auto& c : children_) c.module->init(rng);
	}

	std::size_t size() const { return children_.size(); }
	Module<Scalar>& at(std::size_t i) { return *children_.at(i).module; }

private:
	struct Child {
		std::string name;
		std::unique_ptr<Module<Scalar>> module;
	};
	std::vector<Child> children_;
};

// ---------------------------------------------------------------------------
// Layer factories: PH variants when n > 1, real-valued otherwise.

template<typename Scalar>
std::unique_ptr<Module<Scalar>> make_channel_mix(Index n, Index d_in, Index d_out, bool with_bias = true) {
	if (n == 1) return std::make_unique<Dense<Scalar>>(d_in, d_out, with_bias);
	return std::make_unique<PHM<Scalar>>(n, d_in, d_out, with_bias);
}

template<typename Scalar>
std::unique_ptr<Module<Scalar>> make_conv(Index n, Index d_in, Index d_out, Index kernel, ConvOptions opts = {},
		bool with_bias = true) {
	if (n == 1 || opts.groups != 1) return std::make_unique<Conv<Scalar>>(d_in, d_out, kernel, opts, with_bias);
	return std::make_unique<PHC<Scalar>>(n, d_in, d_out, kernel, opts, with_bias);
}

/// Rounds `value` to the nearest positive multiple of n (ties round up).
inline Index round_to_multiple(double value, Index n) {
	const double m = std::floor(value / static_cast<double>(n) + 0.5);
	return std::max<Index>(n, static_cast<Index>(m) * n);
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

/**
 * Channel recalibration: global average squeeze, reduce by `reduction`, ReLU,
 * expand, sigmoid gate multiplied onto the input.
 */
template<typename Scalar>
class SEBlock : public Module<Scalar> {
public:
	static constexpr Index default_reduction = 8;

	/// `real_layers` keeps the n-rounded widths but builds real-valued mixing layers.
	SEBlock(Index n, Index channels, Index reduction = default_reduction, bool real_layers = false)
			: channels_(channels) {
		if (channels % n != 0)
			throw ConfigError("se: channel count " + std::to_string(channels) + " not divisible by n=" +
					std::to_string(n));
		hidden_ = channels / reduction;
		if (hidden_ < 1) throw ConfigError("se: channel count " + std::to_string(channels) + " below reduction ratio");
		if (hidden_ % n != 0) hidden_ = round_to_multiple(static_cast<double>(hidden_), n);
		const Index mix_n = real_layers ? 1 : n;
		reduce_ = make_channel_mix<Scalar>(mix_n, channels, hidden_);
		expand_ = make_channel_mix<Scalar>(mix_n, hidden_, channels);
	}

	Var<Scalar> forward(Tape<Scalar>& tape, const Var<Scalar>& x, ForwardContext& ctx) override {
		Var<Scalar> s = ops::global_pool(x, PoolMode::avg);
		s = ops::relu(reduce_->forward(tape, s, ctx));
		s = ops::sigmoid(expand_->forward(tape, s, ctx));
		return ops::channel_gate(x, s);
	}

	void collect(Registry<Scalar>& reg, const std::string& prefix) override {
		reduce_->collect(reg, join_name(prefix, "reduce"));
		expand_->collect(reg, join_name(prefix, "expand"));
	}

	std::string_view kind() const override { return "se"; }

	void init(Rng& rng) override {
		reduce_->init(rng);
		expand_->init(rng);
	}

	Index channels() const { return channels_; }
	Index hidden() const { return hidden_; }
	Module<Scalar>& reduce() { return *reduce_; }
	Module<Scalar>& expand() { return *expand_; }

private:
	Index channels_, hidden_;
	std::unique_ptr<Module<Scalar>> reduce_, expand_;
};

// ---------------------------------------------------------------------------
// Counting and initialisation

/// Trainable scalars of a module tree.
template<typename Scalar>
Index param_count(Module<Scalar>& m) {
	Registry<Scalar> reg;
	m.collect(reg, "");
	return reg.parameter_count();
}

inline double reduction_ratio(Index ph_count, Index real_count) {
	return static_cast<double>(ph_count) / static_cast<double>(real_count);
}

/// Closed-form trainable counts.
inline Index phm_param_count(Index n, Index d_in, Index d_out, bool bias = true) {
	return n * n * n + d_out * d_in / n + (bias ? d_out : 0);
}
inline Index phc_param_count(Index n, Index d_in, Index d_out, Index k, bool bias = true) {
	return n * n * n + d_out * d_in * k / n + (bias ? d_out : 0);
}

template<typename Scalar>
void init_he(Module<Scalar>& m, Rng& rng) {
	m.init(rng);
}

} // namespace hkecg
