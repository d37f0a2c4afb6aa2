#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hkecg/errors.hpp"
#include "hkecg/rng.hpp"
#include "hkecg/tensor.hpp"

namespace hkecg {

using NodeId = std::ptrdiff_t;

/// Trainable tensor with a persistent gradient buffer.
template<typename Scalar>
struct Parameter {
	Tensor<Scalar> value;
	std::optional<Tensor<Scalar>> grad;

	Parameter() = default;
	explicit Parameter(Tensor<Scalar> v) : value(std::move(v)) { }

	const Shape& shape() const { return value.shape(); }
	Index size() const { return value.size(); }
	void zero_grad() { grad.reset(); }
};

template<typename Scalar>
class Tape;

/// Handle to a node on a tape.
template<typename Scalar>
class Var {
public:
	Var() = default;

	Tape<Scalar>* tape() const { return tape_; }
	NodeId id() const { return id_; }
	const Tensor<Scalar>& value() const { return tape_->value(id_); }
	Shape shape() const { return value().shape(); }
	Index dim(Index axis) const { return value().dim(axis); }
	bool requires_grad() const { return tape_->requires_grad(id_); }

private:
	friend class Tape<Scalar>;
	Var(Tape<Scalar>* tape, NodeId id) : tape_(tape), id_(id) { }

	Tape<Scalar>* tape_ = nullptr;
	NodeId id_ = -1;
};

template<typename Scalar>
using Gradients = std::map<NodeId, Tensor<Scalar>>;

/**
 * Reverse-mode tape. Nodes are appended in creation order, so every node's
 * inputs precede it and a reverse sweep is a valid topological order.
 *
 * Leaf gradients accumulate across backward passes (parameter-bound leaves
 * accumulate straight into Parameter::grad); interior gradients are reset at
 * the start of every pass.
 */
template<typename Scalar>
class Tape {
public:
	/// Adds the node's contribution into each non-null input gradient.
	using BackwardFn =
			std::function<void(const Tape&, const Tensor<Scalar>& grad_out, std::span<Tensor<Scalar>* const> grad_in)>;

	Tape() = default;
	Tape(const Tape&) = delete;
	Tape& operator=(const Tape&) = delete;

	void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
	bool grad_enabled() const { return grad_enabled_; }

	Var<Scalar> constant(Tensor<Scalar> value) { return push_leaf(std::move(value), false, nullptr); }

	Var<Scalar> variable(Tensor<Scalar> value) { return push_leaf(std::move(value), grad_enabled_, nullptr); }

	Var<Scalar> parameter(Parameter<Scalar>& p) { return push_leaf(p.value, grad_enabled_, &p); }

	Var<Scalar> record(std::string_view op, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
			BackwardFn backward) {
		return record(op, std::move(value), std::vector<Var<Scalar>>(inputs), std::move(backward));
	}

	Var<Scalar> record(std::string_view op, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
			BackwardFn backward) {
		Node node;
		node.op = std::string(op);
		node.value = std::move(value);
		bool needs = false;
		for (const auto& in : inputs) {
			if (in.tape_ != this) throw UsageError("variable from a different tape passed to " + node.op);
			node.inputs.push_back(in.id_);
			needs = needs || nodes_[static_cast<std::size_t>(in.id_)].requires_grad;
		}
		node.requires_grad = needs && grad_enabled_;
		if (node.requires_grad) node.backward = std::move(backward);
		nodes_.push_back(std::move(node));
		return Var<Scalar>(this, static_cast<NodeId>(nodes_.size()) - 1);
	}

	const Tensor<Scalar>& value(NodeId id) const { return node(id).value; }
	bool requires_grad(NodeId id) const { return node(id).requires_grad; }
	std::string_view op(NodeId id) const { return node(id).op; }
	const std::vector<NodeId>& inputs(NodeId id) const { return node(id).inputs; }
	std::size_t size() const { return nodes_.size(); }

	/// Accumulated gradient of a leaf; throws if none has been produced.
	const Tensor<Scalar>& grad(const Var<Scalar>& v) const {
		const Node& n = node(v.id_);
		const auto& g = n.param ? n.param->grad : n.grad;
		if (!g) throw UsageError("no gradient recorded for node " + std::to_string(v.id_));
		return *g;
	}

	/**
	 * Back-propagates from a scalar loss. Returns the accumulated gradient of
	 * every gradient-requiring leaf reached by the sweep.
	 */
	Gradients<Scalar> backward(const Var<Scalar>& loss) {
		if (loss.tape_ != this) throw UsageError("loss belongs to a different tape");
		Node& root = node(loss.id_);
		if (root.value.size() != 1) throw UsageError("backward: loss must be scalar, got " + shape_str(root.value.shape()));
		for (auto& n : nodes_)
			if (!n.is_leaf) n.grad.reset();
		Gradients<Scalar> out;
		if (!root.requires_grad) return out;
		slot(root)[0] += Scalar(1);

		std::vector<Tensor<Scalar>*> grad_in;
		for (NodeId id = loss.id_; id >= 0; --id) {
			Node& n = node(id);
			if (n.is_leaf || !n.requires_grad || !n.grad) continue;
			grad_in.clear();
			for (NodeId in : n.inputs) {
				if (in >= id) throw std::logic_error("autodiff: tape cycle at node " + std::to_string(id));
				Node& src = node(in);
				grad_in.push_back(src.requires_grad ? &slot(src) : nullptr);
			}
			n.backward(*this, *n.grad, grad_in);
			n.grad.reset();
		}
		for (NodeId id = 0; id <= loss.id_; ++id) {
			const Node& n = node(id);
			if (!n.is_leaf || !n.requires_grad) continue;
			const auto& g = n.param ? n.param->grad : n.grad;
			if (g) out.emplace(id, *g);
		}
		return out;
	}

private:
	struct Node {
		std::string op;
		Tensor<Scalar> value;
		std::vector<NodeId> inputs;
		BackwardFn backward;
		bool requires_grad = false;
		bool is_leaf = false;
		Parameter<Scalar>* param = nullptr;
		std::optional<Tensor<Scalar>> grad;
	};

	Var<Scalar> push_leaf(Tensor<Scalar> value, bool requires_grad, Parameter<Scalar>* param) {
		Node node;
		node.op = param ? "parameter" : (requires_grad ? "variable" : "constant");
		node.value = std::move(value);
		node.requires_grad = requires_grad;
		node.is_leaf = true;
		node.param = param;
		nodes_.push_back(std::move(node));
		return Var<Scalar>(this, static_cast<NodeId>(nodes_.size()) - 1);
	}

	Node& node(NodeId id) {
		if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) throw UsageError("invalid node id");
		return nodes_[static_cast<std::size_t>(id)];
	}
	const Node& node(NodeId id) const {
		if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) throw UsageError("invalid node id");
		return nodes_[static_cast<std::size_t>(id)];
	}

	Tensor<Scalar>& slot(Node& n) {
		auto& g = n.param ? n.param->grad : n.grad;
		if (!g) g.emplace(n.value.shape());
		return *g;
	}

	std::vector<Node> nodes_;
	bool grad_enabled_ = true;
};

// ===========================================================================
// Differentiable operations

namespace ops {

template<typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
	a.value().require_same_shape(b.value(), "add");
	Tensor<Scalar> y = a.value();
	y += b.value();
	return a.tape()->record("add", std::move(y), {a, b}, [](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
		if (gin[0]) *gin[0] += g;
		if (gin[1]) *gin[1] += g;
	});
}

template<typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
	a.value().require_same_shape(b.value(), "mul");
	Tensor<Scalar> y(a.shape());
	for (Index i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
	const NodeId ia = a.id(), ib = b.id();
	return a.tape()->record("mul", std::move(y), {a, b},
			[ia, ib](const Tape<Scalar>& t, const Tensor<Scalar>& g, auto gin) {
				const auto& va = t.value(ia);
				const auto& vb = t.value(ib);
				if (gin[0])
					for (Index i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * vb[i];
				if (gin[1])
					for (Index i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * va[i];
			});
}

template<typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar c) {
	Tensor<Scalar> y = a.value();
	y *= c;
	return a.tape()->record("scale", std::move(y), {a}, [c](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
		for (Index i = 0; i < g.size(); ++i) (*gin[0])[i] += c * g[i];
	});
}

template<typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
	Scalar s = 0;
	for (Scalar v : a.value().values()) s += v;
	return a.tape()->record("sum", Tensor<Scalar>::scalar(s), {a},
			[](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (auto& v : gin[0]->values()) v += g[0];
			});
}

template<typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
	return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Sum of a ∘ weights for a constant weight tensor.
template<typename Scalar>
Var<Scalar> weighted_sum(const Var<Scalar>& a, const Tensor<Scalar>& weights) {
	a.value().require_same_shape(weights, "weighted_sum");
	Scalar s = 0;
	for (Index i = 0; i < weights.size(); ++i) s += a.value()[i] * weights[i];
	return a.tape()->record("weighted_sum", Tensor<Scalar>::scalar(s), {a},
			[weights](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index i = 0; i < weights.size(); ++i) (*gin[0])[i] += g[0] * weights[i];
			});
}

template<typename Scalar>
Var<Scalar> activation(const Var<Scalar>& x, Activation kind) {
	const NodeId ix = x.id();
	return x.tape()->record("activation", hkecg::activation(x.value(), kind), {x},
			[ix, kind](const Tape<Scalar>& t, const Tensor<Scalar>& g, auto gin) {
				const auto& vx = t.value(ix);
				for (Index i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * activate_grad(kind, vx[i]);
			});
}

template<typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
	return activation(x, Activation::relu);
}
template<typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
	return activation(x, Activation::sigmoid);
}
template<typename Scalar>
Var<Scalar> mish(const Var<Scalar>& x) {
	return activation(x, Activation::mish);
}

/// w (d_out x d_in) times x (d_in or d_in x t).
template<typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& w, const Var<Scalar>& x) {
	const NodeId iw = w.id(), ix = x.id();
	return w.tape()->record("matmul", hkecg::matmul(w.value(), x.value()), {w, x},
			[iw, ix](const Tape<Scalar>& t, const Tensor<Scalar>& g, auto gin) {
				const auto& vw = t.value(iw);
				const auto& vx = t.value(ix);
				const Index rows = vw.dim(0), inner = vw.dim(1);
				auto gm = g.matrix(rows);
				if (gin[0]) gin[0]->matrix(rows).noalias() += gm * vx.matrix(inner).transpose();
				if (gin[1]) gin[1]->matrix(inner).noalias() += vw.matrix(rows).transpose() * gm;
			});
}

/**
 * Dense channel mix of a batch: x is b x d_in (vectors) or b x d_in x t
 * (time-distributed); w is d_out x d_in; bias optional.
 */
template<typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& w, const std::optional<Var<Scalar>>& bias) {
	const auto& vx = x.value();
	const auto& vw = w.value();
	if (vw.rank() != 2 || (vx.rank() != 2 && vx.rank() != 3) || vx.dim(1) != vw.dim(1))
		throw ShapeError("linear: input " + shape_str(vx.shape()) + " vs weight " + shape_str(vw.shape()));
	const Index b = vx.dim(0), d_in = vw.dim(1), d_out = vw.dim(0);
	const Index t = vx.rank() == 3 ? vx.dim(2) : 1;
	if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != d_out))
		throw ShapeError("linear: bias length mismatch");
	Shape out_shape = vx.rank() == 3 ? Shape{b, d_out, t} : Shape{b, d_out};
	Tensor<Scalar> y(out_shape);
	auto wm = vw.matrix(d_out);
	if (vx.rank() == 2) {
		y.matrix(b).noalias() = vx.matrix(b) * wm.transpose();
	} else {
		for (Index s = 0; s < b; ++s) {
			ConstMatrixMap<Scalar> xs(vx.data() + s * d_in * t, d_in, t);
			MatrixMap<Scalar> ys(y.data() + s * d_out * t, d_out, t);
			ys.noalias() = wm * xs;
		}
	}
	if (bias) {
		const auto& vb = bias->value();
		for (Index s = 0; s < b; ++s)
			for (Index o = 0; o < d_out; ++o) {
				Scalar* row = y.data() + (s * d_out + o) * t;
				for (Index k = 0; k < t; ++k) row[k] += vb[o];
			}
	}
	std::vector<Var<Scalar>> inputs{x, w};
	if (bias) inputs.push_back(*bias);
	const NodeId ix = x.id(), iw = w.id();
	return x.tape()->record("linear", std::move(y), inputs,
			[ix, iw, b, d_in, d_out, t](const Tape<Scalar>& tp, const Tensor<Scalar>& g, auto gin) {
				const auto& vx = tp.value(ix);
				const auto& vw = tp.value(iw);
				auto wm = vw.matrix(d_out);
				if (vx.rank() == 2) {
					auto gm = g.matrix(b);
					if (gin[0]) gin[0]->matrix(b).noalias() += gm * wm;
					if (gin[1]) gin[1]->matrix(d_out).noalias() += gm.transpose() * vx.matrix(b);
				} else {
					for (Index s = 0; s < b; ++s) {
						ConstMatrixMap<Scalar> gs(g.data() + s * d_out * t, d_out, t);
						ConstMatrixMap<Scalar> xs(vx.data() + s * d_in * t, d_in, t);
						if (gin[0]) {
							MatrixMap<Scalar> gxs(gin[0]->data() + s * d_in * t, d_in, t);
							gxs.noalias() += wm.transpose() * gs;
						}
						if (gin[1]) gin[1]->matrix(d_out).noalias() += gs * xs.transpose();
					}
				}
				if (gin.size() > 2 && gin[2])
					for (Index s = 0; s < b; ++s)
						for (Index o = 0; o < d_out; ++o) {
							const Scalar* row = g.data() + (s * d_out + o) * t;
							Scalar acc = 0;
							for (Index k = 0; k < t; ++k) acc += row[k];
							(*gin[2])[o] += acc;
						}
			});
}

/// Batched conv1d: x is b x d_in x t_in.
template<typename Scalar>
Var<Scalar> conv1d(const Var<Scalar>& x, const Var<Scalar>& w, const std::optional<Var<Scalar>>& bias,
		const ConvOptions& o) {
	const auto& vx = x.value();
	const auto& vw = w.value();
	if (vx.rank() != 3) throw ShapeError("conv1d: batched input must be b x d x t, got " + shape_str(vx.shape()));
	if (vw.rank() != 3) throw ShapeError("conv1d: weight must be d_out x d_in/groups x k");
	const Index b = vx.dim(0), d_in = vx.dim(1), t_in = vx.dim(2), d_out = vw.dim(0), k = vw.dim(2);
	detail::check_conv(d_in, t_in, d_out, vw.dim(1), k, o);
	if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != d_out))
		throw ShapeError("conv1d: bias length mismatch");
	const Index t_out = conv_output_length(t_in, k, o);
	Tensor<Scalar> y({b, d_out, t_out});
	std::vector<Scalar> scratch;
	const Scalar* pb = bias ? bias->value().data() : nullptr;
	for (Index s = 0; s < b; ++s)
		detail::conv1d_sample(vx.data() + s * d_in * t_in, d_in, t_in, vw.data(), d_out, k, pb, o, t_out,
				y.data() + s * d_out * t_out, scratch);
	std::vector<Var<Scalar>> inputs{x, w};
	if (bias) inputs.push_back(*bias);
	const NodeId ix = x.id(), iw = w.id();
	return x.tape()->record("conv1d", std::move(y), inputs,
			[ix, iw, o, b, d_in, t_in, d_out, k, t_out](const Tape<Scalar>& tp, const Tensor<Scalar>& g, auto gin) {
				const auto& vx = tp.value(ix);
				const auto& vw = tp.value(iw);
				std::vector<Scalar> scratch;
				Scalar* gb = gin.size() > 2 && gin[2] ? gin[2]->data() : nullptr;
				for (Index s = 0; s < b; ++s)
					detail::conv1d_sample_backward(vx.data() + s * d_in * t_in, d_in, t_in, vw.data(), d_out, k, o,
							t_out, g.data() + s * d_out * t_out, gin[0] ? gin[0]->data() + s * d_in * t_in : nullptr,
							gin[1] ? gin[1]->data() : nullptr, gb, scratch);
			});
}

/**
 * Sum of Kronecker products: factors is n x n x n (n algebra matrices),
 * blocks is n x p x q or n x p x q x k. Returns H of shape np x nq (x k).
 */
template<typename Scalar>
Tensor<Scalar> kron_sum_value(const Tensor<Scalar>& factors, const Tensor<Scalar>& blocks) {
	if (factors.rank() != 3 || factors.dim(1) != factors.dim(0) || factors.dim(2) != factors.dim(0))
		throw ShapeError("kron_sum: factors must be n x n x n, got " + shape_str(factors.shape()));
	if ((blocks.rank() != 3 && blocks.rank() != 4) || blocks.dim(0) != factors.dim(0))
		throw ShapeError("kron_sum: blocks must be n x p x q [x k], got " + shape_str(blocks.shape()));
	const Index n = factors.dim(0), p = blocks.dim(1), q = blocks.dim(2), k = blocks.rank() == 4 ? blocks.dim(3) : 1;
	Shape out_shape{n * p, n * q};
	if (blocks.rank() == 4) out_shape.push_back(k);
	Tensor<Scalar> h(out_shape);
	const Index block = p * q * k;
	for (Index i = 0; i < n; ++i) {
		const Scalar* bi = blocks.data() + i * block;
		for (Index j = 0; j < n; ++j)
			for (Index l = 0; l < n; ++l) {
				const Scalar a = factors(i, j, l);
				for (Index r = 0; r < p; ++r) {
					Scalar* dst = h.data() + ((j * p + r) * n * q + l * q) * k;
					const Scalar* src = bi + r * q * k;
					for (Index e = 0; e < q * k; ++e) dst[e] += a * src[e];
				}
			}
	}
	return h;
}

template<typename Scalar>
Var<Scalar> kron_sum(const Var<Scalar>& factors, const Var<Scalar>& blocks) {
	const NodeId ia = factors.id(), ib = blocks.id();
	return factors.tape()->record("kron_sum", kron_sum_value(factors.value(), blocks.value()), {factors, blocks},
			[ia, ib](const Tape<Scalar>& t, const Tensor<Scalar>& g, auto gin) {
				const auto& va = t.value(ia);
				const auto& vb = t.value(ib);
				const Index n = va.dim(0), p = vb.dim(1), q = vb.dim(2), k = vb.rank() == 4 ? vb.dim(3) : 1;
				const Index block = p * q * k;
				for (Index i = 0; i < n; ++i) {
					const Scalar* bi = vb.data() + i * block;
					for (Index j = 0; j < n; ++j)
						for (Index l = 0; l < n; ++l) {
							Scalar dot = 0;
							const Scalar a = va(i, j, l);
							for (Index r = 0; r < p; ++r) {
								const Scalar* gh = g.data() + ((j * p + r) * n * q + l * q) * k;
								const Scalar* src = bi + r * q * k;
								if (gin[1]) {
									Scalar* gbi = gin[1]->data() + i * block + r * q * k;
									for (Index e = 0; e < q * k; ++e) gbi[e] += a * gh[e];
								}
								for (Index e = 0; e < q * k; ++e) dot += gh[e] * src[e];
							}
							if (gin[0]) (*gin[0])(i, j, l) += dot;
						}
				}
			});
}

/**
 * Batch normalisation over (batch, time) per channel for x of shape b x d x t.
 * Training mode normalises with batch statistics and updates the running
 * estimates in place; eval mode applies the running statistics.
 */
template<typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
		Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training, Scalar momentum, Scalar eps) {
	const auto& vx = x.value();
	if (vx.rank() != 3 || gamma.value().size() != vx.dim(1))
		throw ShapeError("batch_norm: input must be b x d x t matching gamma");
	const Index b = vx.dim(0), d = vx.dim(1), t = vx.dim(2);
	const Index count = b * t;
	Tensor<Scalar> mean({d}), inv_std({d});
	for (Index c = 0; c < d; ++c) {
		if (training) {
			double acc = 0;
			for (Index s = 0; s < b; ++s) {
				const Scalar* row = vx.data() + (s * d + c) * t;
				for (Index k = 0; k < t; ++k) acc += row[k];
			}
			const double mu = acc / static_cast<double>(count);
			double sq = 0;
			for (Index s = 0; s < b; ++s) {
				const Scalar* row = vx.data() + (s * d + c) * t;
				for (Index k = 0; k < t; ++k) sq += (row[k] - mu) * (row[k] - mu);
			}
			const double var = sq / static_cast<double>(count);
			mean[c] = static_cast<Scalar>(mu);
			inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(eps)));
			const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
			running_mean[c] = (Scalar(1) - momentum) * running_mean[c] + momentum * static_cast<Scalar>(mu);
			running_var[c] = (Scalar(1) - momentum) * running_var[c] + momentum * static_cast<Scalar>(unbiased);
		} else {
			mean[c] = running_mean[c];
			inv_std[c] = Scalar(1) / std::sqrt(running_var[c] + eps);
		}
	}
	Tensor<Scalar> y(vx.shape());
	const auto& vg = gamma.value();
	const auto& vb = beta.value();
	for (Index s = 0; s < b; ++s)
		for (Index c = 0; c < d; ++c) {
			const Scalar* row = vx.data() + (s * d + c) * t;
			Scalar* out = y.data() + (s * d + c) * t;
			const Scalar a = vg[c] * inv_std[c];
			const Scalar shift = vb[c] - a * mean[c];
			for (Index k = 0; k < t; ++k) out[k] = a * row[k] + shift;
		}
	const NodeId ix = x.id(), ig = gamma.id();
	return x.tape()->record("batch_norm", std::move(y), {x, gamma, beta},
			[ix, ig, mean, inv_std, training, b, d, t](const Tape<Scalar>& tp, const Tensor<Scalar>& g, auto gin) {
				const auto& vx = tp.value(ix);
				const auto& vg = tp.value(ig);
				const Scalar n = static_cast<Scalar>(b * t);
				for (Index c = 0; c < d; ++c) {
					Scalar sum_g = 0, sum_gx = 0;
					for (Index s = 0; s < b; ++s) {
						const Scalar* gr = g.data() + (s * d + c) * t;
						const Scalar* xr = vx.data() + (s * d + c) * t;
						for (Index k = 0; k < t; ++k) {
							sum_g += gr[k];
							sum_gx += gr[k] * (xr[k] - mean[c]) * inv_std[c];
						}
					}
					if (gin[1]) (*gin[1])[c] += sum_gx;
					if (gin[2]) (*gin[2])[c] += sum_g;
					if (!gin[0]) continue;
					const Scalar a = vg[c] * inv_std[c];
					for (Index s = 0; s < b; ++s) {
						const Scalar* gr = g.data() + (s * d + c) * t;
						const Scalar* xr = vx.data() + (s * d + c) * t;
						Scalar* gx = gin[0]->data() + (s * d + c) * t;
						for (Index k = 0; k < t; ++k) {
							if (training) {
								const Scalar xhat = (xr[k] - mean[c]) * inv_std[c];
								gx[k] += a * (gr[k] - sum_g / n - xhat * sum_gx / n);
							} else {
								gx[k] += a * gr[k];
							}
						}
					}
				}
			});
}

/// Windowed pooling over the time axis of b x d x t; max routes gradients via the earliest argmax.
template<typename Scalar>
Var<Scalar> pool1d(const Var<Scalar>& x, PoolMode mode, Index kernel, Index stride) {
	const auto& vx = x.value();
	if (vx.rank() != 3) throw ShapeError("pool1d: batched input must be b x d x t");
	const Index rows = vx.dim(0) * vx.dim(1), t = vx.dim(2);
	if (kernel < 1 || stride < 1 || kernel > t)
		throw ShapeError("pool1d: kernel " + std::to_string(kernel) + " exceeds length " + std::to_string(t));
	const Index t_out = pool_output_length(t, kernel, stride);
	Tensor<Scalar> y({vx.dim(0), vx.dim(1), t_out});
	std::vector<Index> argmax;
	if (mode == PoolMode::max) argmax.resize(static_cast<std::size_t>(rows * t_out));
	for (Index r = 0; r < rows; ++r)
		for (Index j = 0; j < t_out; ++j) {
			const Index base = r * t + j * stride;
			if (mode == PoolMode::max) {
				Index best = base;
				for (Index i = 1; i < kernel; ++i)
					if (vx[base + i] > vx[best]) best = base + i;
				argmax[static_cast<std::size_t>(r * t_out + j)] = best;
				y[r * t_out + j] = vx[best];
			} else {
				Scalar acc = 0;
				for (Index i = 0; i < kernel; ++i) acc += vx[base + i];
				y[r * t_out + j] = acc / static_cast<Scalar>(kernel);
			}
		}
	return x.tape()->record(mode == PoolMode::max ? "max_pool" : "avg_pool", std::move(y), {x},
			[argmax = std::move(argmax), mode, rows, t, t_out, kernel, stride](
					const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				auto& gx = *gin[0];
				for (Index r = 0; r < rows; ++r)
					for (Index j = 0; j < t_out; ++j) {
						const Scalar gv = g[r * t_out + j];
						if (mode == PoolMode::max) {
							gx[argmax[static_cast<std::size_t>(r * t_out + j)]] += gv;
						} else {
							const Index base = r * t + j * stride;
							for (Index i = 0; i < kernel; ++i) gx[base + i] += gv / static_cast<Scalar>(kernel);
						}
					}
			});
}

/// Full-length pooling of b x d x t to b x d.
template<typename Scalar>
Var<Scalar> global_pool(const Var<Scalar>& x, PoolMode mode) {
	const auto& vx = x.value();
	if (vx.rank() != 3) throw ShapeError("global_pool: batched input must be b x d x t");
	const Index b = vx.dim(0), d = vx.dim(1), t = vx.dim(2);
	Tensor<Scalar> y({b, d});
	std::vector<Index> argmax(mode == PoolMode::max ? static_cast<std::size_t>(b * d) : 0);
	for (Index r = 0; r < b * d; ++r) {
		const Scalar* row = vx.data() + r * t;
		if (mode == PoolMode::max) {
			Index best = 0;
			for (Index k = 1; k < t; ++k)
				if (row[k] > row[best]) best = k;
			argmax[static_cast<std::size_t>(r)] = best;
			y[r] = row[best];
		} else {
			Scalar acc = 0;
			for (Index k = 0; k < t; ++k) acc += row[k];
			y[r] = acc / static_cast<Scalar>(t);
		}
	}
	return x.tape()->record(mode == PoolMode::max ? "global_max_pool" : "global_avg_pool", std::move(y), {x},
			[argmax = std::move(argmax), mode, b, d, t](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				auto& gx = *gin[0];
				for (Index r = 0; r < b * d; ++r) {
					if (mode == PoolMode::max) {
						gx[r * t + argmax[static_cast<std::size_t>(r)]] += g[r];
					} else {
						const Scalar gv = g[r] / static_cast<Scalar>(t);
						for (Index k = 0; k < t; ++k) gx[r * t + k] += gv;
					}
				}
			});
}

/// Endpoint-aligned linear resampling of b x d x t along time.
template<typename Scalar>
Var<Scalar> interpolate(const Var<Scalar>& x, Index t_target) {
	const auto& vx = x.value();
	if (vx.rank() != 3 || t_target < 1) throw ShapeError("interpolate: batched input must be b x d x t");
	const Index rows = vx.dim(0) * vx.dim(1), t = vx.dim(2);
	auto taps = detail::interp_taps(t, t_target);
	Tensor<Scalar> y({vx.dim(0), vx.dim(1), t_target});
	for (Index r = 0; r < rows; ++r) {
		const Scalar* xr = vx.data() + r * t;
		Scalar* yr = y.data() + r * t_target;
		for (Index i = 0; i < t_target; ++i) {
			const auto& tp = taps[static_cast<std::size_t>(i)];
			const Scalar f = static_cast<Scalar>(tp.frac);
			yr[i] = (Scalar(1) - f) * xr[tp.lo] + f * xr[tp.hi];
		}
	}
	return x.tape()->record("interpolate", std::move(y), {x},
			[taps = std::move(taps), rows, t, t_target](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index r = 0; r < rows; ++r) {
					const Scalar* gr = g.data() + r * t_target;
					Scalar* gx = gin[0]->data() + r * t;
					for (Index i = 0; i < t_target; ++i) {
						const auto& tp = taps[static_cast<std::size_t>(i)];
						const Scalar f = static_cast<Scalar>(tp.frac);
						gx[tp.lo] += (Scalar(1) - f) * gr[i];
						gx[tp.hi] += f * gr[i];
					}
				}
			});
}

/// Concatenation of b x d_i x t tensors along the channel axis.
template<typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
	if (parts.empty()) throw ShapeError("concat_channels: no inputs");
	const auto& first = parts.front().value();
	if (first.rank() != 3) throw ShapeError("concat_channels: inputs must be b x d x t");
	const Index b = first.dim(0), t = first.dim(2);
	std::vector<Index> widths;
	Index total = 0;
	for (const auto& p : parts) {
		const auto& v = p.value();
		if (v.rank() != 3 || v.dim(0) != b || v.dim(2) != t)
			throw ShapeError("concat_channels: mismatched " + shape_str(v.shape()) + " vs " + shape_str(first.shape()));
		widths.push_back(v.dim(1));
		total += v.dim(1);
	}
	Tensor<Scalar> y({b, total, t});
	for (Index s = 0; s < b; ++s) {
		Index offset = 0;
		for (std::size_t i = 0; i < parts.size(); ++i) {
			const auto& v = parts[i].value();
			std::copy_n(v.data() + s * widths[i] * t, widths[i] * t, y.data() + (s * total + offset) * t);
			offset += widths[i];
		}
	}
	return parts.front().tape()->record("concat", std::move(y), parts,
			[widths, b, total, t](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index s = 0; s < b; ++s) {
					Index offset = 0;
					for (std::size_t i = 0; i < widths.size(); ++i) {
						if (gin[i]) {
							const Scalar* src = g.data() + (s * total + offset) * t;
							Scalar* dst = gin[i]->data() + s * widths[i] * t;
							for (Index e = 0; e < widths[i] * t; ++e) dst[e] += src[e];
						}
						offset += widths[i];
					}
				}
			});
}

/// Append zero channels to b x d x t so that it has `channels` channels.
template<typename Scalar>
Var<Scalar> pad_channels(const Var<Scalar>& x, Index channels) {
	const auto& vx = x.value();
	if (vx.rank() != 3 || channels < vx.dim(1)) throw ShapeError("pad_channels: cannot pad to fewer channels");
	const Index b = vx.dim(0), d = vx.dim(1), t = vx.dim(2);
	Tensor<Scalar> y({b, channels, t});
	for (Index s = 0; s < b; ++s) std::copy_n(vx.data() + s * d * t, d * t, y.data() + s * channels * t);
	return x.tape()->record("pad_channels", std::move(y), {x},
			[b, d, t, channels](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index s = 0; s < b; ++s)
					for (Index e = 0; e < d * t; ++e) (*gin[0])[s * d * t + e] += g[s * channels * t + e];
			});
}

/// out[b,c,t] = x[b,c,t] * gate[b,c].
template<typename Scalar>
Var<Scalar> channel_gate(const Var<Scalar>& x, const Var<Scalar>& gate) {
	const auto& vx = x.value();
	const auto& vs = gate.value();
	if (vx.rank() != 3 || vs.rank() != 2 || vs.dim(0) != vx.dim(0) || vs.dim(1) != vx.dim(1))
		throw ShapeError("channel_gate: " + shape_str(vx.shape()) + " vs gate " + shape_str(vs.shape()));
	const Index rows = vx.dim(0) * vx.dim(1), t = vx.dim(2);
	Tensor<Scalar> y(vx.shape());
	for (Index r = 0; r < rows; ++r)
		for (Index k = 0; k < t; ++k) y[r * t + k] = vx[r * t + k] * vs[r];
	const NodeId ix = x.id(), is = gate.id();
	return x.tape()->record("channel_gate", std::move(y), {x, gate},
			[ix, is, rows, t](const Tape<Scalar>& tp, const Tensor<Scalar>& g, auto gin) {
				const auto& vx = tp.value(ix);
				const auto& vs = tp.value(is);
				for (Index r = 0; r < rows; ++r) {
					Scalar acc = 0;
					for (Index k = 0; k < t; ++k) {
						if (gin[0]) (*gin[0])[r * t + k] += g[r * t + k] * vs[r];
						acc += g[r * t + k] * vx[r * t + k];
					}
					if (gin[1]) (*gin[1])[r] += acc;
				}
			});
}

/// Inverted dropout; identity outside training or for p == 0.
template<typename Scalar>
Var<Scalar> dropout(const Var<Scalar>& x, double p, bool training, Rng& rng) {
	if (!training || p <= 0.0) return x;
	if (p >= 1.0) throw UsageError("dropout probability must be in [0, 1)");
	const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
	Tensor<Scalar> mask(x.shape());
	for (auto& m : mask.values()) m = rng.uniform() < p ? Scalar(0) : keep_scale;
	Tensor<Scalar> y(x.shape());
	for (Index i = 0; i < y.size(); ++i) y[i] = x.value()[i] * mask[i];
	return x.tape()->record("dropout", std::move(y), {x},
			[mask = std::move(mask)](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * mask[i];
			});
}

/// Row-wise softmax of b x c.
template<typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x) {
	const auto& vx = x.value();
	if (vx.rank() != 2) throw ShapeError("softmax: input must be b x c");
	const Index b = vx.dim(0), c = vx.dim(1);
	Tensor<Scalar> y(vx.shape());
	for (Index s = 0; s < b; ++s) {
		const Scalar* row = vx.data() + s * c;
		const Scalar m = *std::max_element(row, row + c);
		Scalar z = 0;
		for (Index j = 0; j < c; ++j) z += (y[s * c + j] = std::exp(row[j] - m));
		for (Index j = 0; j < c; ++j) y[s * c + j] /= z;
	}
	Tensor<Scalar> saved = y;
	return x.tape()->record("softmax", std::move(y), {x},
			[saved = std::move(saved), b, c](const Tape<Scalar>&, const Tensor<Scalar>& g, auto gin) {
				for (Index s = 0; s < b; ++s) {
					Scalar dot = 0;
					for (Index j = 0; j < c; ++j) dot += g[s * c + j] * saved[s * c + j];
					for (Index j = 0; j < c; ++j) (*gin[0])[s * c + j] += saved[s * c + j] * (g[s * c + j] - dot);
				}
			});
}

} // namespace ops

// ===========================================================================
// Finite-difference checking

/// Relative error between an analytic and a numeric derivative.
inline double gradient_relative_error(double analytic, double numeric) {
	return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/**
 * Compares tape gradients of a scalar function against central differences.
 * `f` is called as f(tape, vars) with one variable per input tensor and must
 * return a scalar Var. Returns the largest relative error over all coordinates.
 */
template<typename F>
double grad_check(F&& f, std::vector<Tensor<double>> inputs, double eps = 1e-5) {
	auto evaluate = [&](const std::vector<Tensor<double>>& xs, bool want_grad, Gradients<double>* grads,
			std::vector<NodeId>* ids) {
		Tape<double> tape;
		std::vector<Var<double>> vars;
		for (const auto& x : xs) vars.push_back(tape.variable(x));
		Var<double> loss = f(tape, std::span<const Var<double>>(vars));
		if (want_grad) {
			*grads = tape.backward(loss);
			for (const auto& v : vars) ids->push_back(v.id());
		}
		return loss.value()[0];
	};
	Gradients<double> grads;
	std::vector<NodeId> ids;
	evaluate(inputs, true, &grads, &ids);
	double worst = 0.0;
	for (std::size_t i = 0; i < inputs.size(); ++i) {
		const auto it = grads.find(ids[i]);
		for (Index j = 0; j < inputs[i].size(); ++j) {
			const double analytic = it == grads.end() ? 0.0 : it->second[j];
			const double orig = inputs[i][j];
			inputs[i][j] = orig + eps;
			const double up = evaluate(inputs, false, nullptr, nullptr);
			inputs[i][j] = orig - eps;
			const double down = evaluate(inputs, false, nullptr, nullptr);
			inputs[i][j] = orig;
			worst = std::max(worst, gradient_relative_error(analytic, (up - down) / (2 * eps)));
		}
	}
	return worst;
}

/**
 * Same check over existing parameters: `f(tape)` must bind the parameters via
 * tape.parameter(...) and return a scalar loss.
 */
template<typename F>
double grad_check_parameters(F&& f, const std::vector<Parameter<double>*>& params, double eps = 1e-5) {
	for (auto* p : params) p->zero_grad();
	{
		Tape<double> tape;
		tape.backward(f(tape));
	}
	std::vector<Tensor<double>> analytic;
	for (auto* p : params) analytic.push_back(p->grad ? *p->grad : Tensor<double>(p->shape()));
	auto eval = [&] {
		Tape<double> tape;
		tape.set_grad_enabled(false);
		return f(tape).value()[0];
	};
	double worst = 0.0;
	for (std::size_t i = 0; i < params.size(); ++i) {
		auto& v = params[i]->value;
		for (Index j = 0; j < v.size(); ++j) {
			const double orig = v[j];
			v[j] = orig + eps;
			const double up = eval();
			v[j] = orig - eps;
			const double down = eval();
			v[j] = orig;
			worst = std::max(worst, gradient_relative_error(analytic[i][j], (up - down) / (2 * eps)));
		}
	}
	for (auto* p : params) p->zero_grad();
	return worst;
}

} // namespace hkecg
