#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace hkecg {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

/// Raised when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
public:
	using std::invalid_argument::invalid_argument;
};

template<typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template<typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template<typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline Index shape_size(const Shape& shape) {
	return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
	std::string s = "[";
	for (std::size_t i = 0; i < shape.size(); ++i) {
		if (i) s += ",";
		s += std::to_string(shape[i]);
	}
	return s + "]";
}

/**
 * Dense row-major n-dimensional array. A default-constructed tensor is a
 * rank-0 scalar holding zero.
 */
template<typename Scalar>
class Tensor {
public:
	using value_type = Scalar;

	Tensor() : data_(1, Scalar(0)) { }

	explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
		check_extents();
		data_.assign(static_cast<std::size_t>(shape_size(shape_)), fill);
	}

	Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
		check_extents();
		if (static_cast<Index>(data_.size()) != shape_size(shape_))
			throw ShapeError("tensor data length " + std::to_string(data_.size()) +
					" does not match shape " + shape_str(shape_));
	}

	static Tensor scalar(Scalar v) {
		Tensor t;
		t.data_[0] = v;
		return t;
	}

	static Tensor vector(std::initializer_list<Scalar> values) {
		return Tensor({static_cast<Index>(values.size())}, std::vector<Scalar>(values));
	}

	static Tensor matrix(std::initializer_list<std::initializer_list<Scalar>> rows) {
		const Index r = static_cast<Index>(rows.size());
		const Index c = r ? static_cast<Index>(rows.begin()->size()) : 0;
		std::vector<Scalar> data;
		data.reserve(static_cast<std::size_t>(r * c));
		for (const auto& row : rows) {
			if (static_cast<Index>(row.size()) != c)
				throw ShapeError("ragged matrix literal");
			data.insert(data.end(), row.begin(), row.end());
		}
		return Tensor({r, c}, std::move(data));
	}

	Index rank() const { return static_cast<Index>(shape_.size()); }
	const Shape& shape() const { return shape_; }
	Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
	Index size() const { return static_cast<Index>(data_.size()); }

	Scalar* data() { return data_.data(); }
	const Scalar* data() const { return data_.data(); }
	std::span<Scalar> values() { return data_; }
	std::span<const Scalar> values() const { return data_; }

	Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
	const Scalar& operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

	Scalar& operator()(Index i, Index j) { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
	const Scalar& operator()(Index i, Index j) const {
		return data_[static_cast<std::size_t>(i * shape_[1] + j)];
	}
	Scalar& operator()(Index i, Index j, Index k) {
		return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
	}
	const Scalar& operator()(Index i, Index j, Index k) const {
		return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
	}
	Scalar& operator()(Index i, Index j, Index k, Index l) {
		return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
	}
	const Scalar& operator()(Index i, Index j, Index k, Index l) const {
		return data_[static_cast<std::size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
	}

	/// Row-major matrix view with `rows` rows over the flat data.
	MatrixMap<Scalar> matrix(Index rows) { return MatrixMap<Scalar>(data(), rows, size() / rows); }
	ConstMatrixMap<Scalar> matrix(Index rows) const {
		return ConstMatrixMap<Scalar>(data(), rows, size() / rows);
	}

	Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
	Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

	template<typename Other>
	Tensor<Other> cast() const {
		std::vector<Other> out(data_.size());
		std::transform(data_.begin(), data_.end(), out.begin(), [](Scalar v) { return static_cast<Other>(v); });
		return Tensor<Other>(shape_, std::move(out));
	}

	void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

	Tensor& operator+=(const Tensor& other) {
		require_same_shape(other, "+=");
		for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
		return *this;
	}

	Tensor& operator*=(Scalar c) {
		for (auto& v : data_) v *= c;
		return *this;
	}

	bool operator==(const Tensor& other) const = default;

	void require_same_shape(const Tensor& other, const char* what) const {
		if (shape_ != other.shape_)
			throw ShapeError(std::string(what) + ": shape " + shape_str(shape_) + " vs " + shape_str(other.shape_));
	}

private:
	void check_extents() const {
		for (Index e : shape_)
			if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
	}

	Shape shape_;
	std::vector<Scalar> data_;
};

template<typename Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
	a.require_same_shape(b, "max_abs_diff");
	Scalar m = 0;
	for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
	return m;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, sigmoid, tanh, softplus, mish };

template<typename Scalar>
Scalar sigmoid(Scalar x) {
	if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
	const Scalar e = std::exp(x);
	return e / (Scalar(1) + e);
}

/// ln(1 + e^x) without overflow for large |x|.
template<typename Scalar>
Scalar softplus(Scalar x) {
	if (x > Scalar(20)) return x;
	if (x < Scalar(-20)) return std::exp(x);
	return std::log1p(std::exp(x));
}

template<typename Scalar>
Scalar mish(Scalar x) {
	return x * std::tanh(softplus(x));
}

template<typename Scalar>
Scalar activate(Activation kind, Scalar x) {
	switch (kind) {
	case Activation::relu: return x > 0 ? x : Scalar(0);
	case Activation::sigmoid: return sigmoid(x);
	case Activation::tanh: return std::tanh(x);
	case Activation::softplus: return softplus(x);
	case Activation::mish: return mish(x);
	}
	return x;
}

/// Derivative of the activation at x.
template<typename Scalar>
Scalar activate_grad(Activation kind, Scalar x) {
	switch (kind) {
	case Activation::relu: return x > 0 ? Scalar(1) : Scalar(0);
	case Activation::sigmoid: {
		const Scalar s = sigmoid(x);
		return s * (Scalar(1) - s);
	}
	case Activation::tanh: {
		const Scalar t = std::tanh(x);
		return Scalar(1) - t * t;
	}
	case Activation::softplus: return sigmoid(x);
	case Activation::mish: {
		const Scalar t = std::tanh(softplus(x));
		return t + x * (Scalar(1) - t * t) * sigmoid(x);
	}
	}
	return Scalar(1);
}

template<typename Scalar>
Tensor<Scalar> activation(const Tensor<Scalar>& x, Activation kind) {
	Tensor<Scalar> y(x.shape());
	for (Index i = 0; i < x.size(); ++i) y[i] = activate(kind, x[i]);
	return y;
}

// ---------------------------------------------------------------------------
// Kronecker product

/**
 * Kronecker product of a square matrix `a` (n x n) with `b` of shape p x q or
 * p x q x k. For rank-3 `b` the product acts on the first two axes and the
 * trailing kernel axis is carried along.
 */
template<typename Scalar>
Tensor<Scalar> kron(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
	if (a.rank() != 2 || a.dim(0) != a.dim(1))
		throw ShapeError("kron: left operand must be square, got " + shape_str(a.shape()));
	if (b.rank() != 2 && b.rank() != 3)
		throw ShapeError("kron: right operand must have rank 2 or 3, got " + shape_str(b.shape()));
	const Index n = a.dim(0), p = b.dim(0), q = b.dim(1), k = b.rank() == 3 ? b.dim(2) : 1;
	Shape out_shape{n * p, n * q};
	if (b.rank() == 3) out_shape.push_back(k);
	Tensor<Scalar> out(out_shape);
	for (Index i = 0; i < n; ++i)
		for (Index j = 0; j < n; ++j) {
			const Scalar aij = a(i, j);
			for (Index r = 0; r < p; ++r)
				for (Index s = 0; s < q; ++s) {
					const Scalar* src = b.data() + (r * q + s) * k;
					Scalar* dst = out.data() + ((i * p + r) * n * q + (j * q + s)) * k;
					for (Index kk = 0; kk < k; ++kk) dst[kk] = aij * src[kk];
				}
		}
	return out;
}

// ---------------------------------------------------------------------------
// Matrix product

/// w (d_out x d_in) times x (d_in or d_in x t).
template<typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& w, const Tensor<Scalar>& x) {
	if (w.rank() != 2) throw ShapeError("matmul: weight must be a matrix, got " + shape_str(w.shape()));
	if ((x.rank() != 1 && x.rank() != 2) || x.dim(0) != w.dim(1))
		throw ShapeError("matmul: " + shape_str(w.shape()) + " x " + shape_str(x.shape()));
	const Index cols = x.rank() == 2 ? x.dim(1) : 1;
	Tensor<Scalar> y(x.rank() == 2 ? Shape{w.dim(0), cols} : Shape{w.dim(0)});
	y.matrix(w.dim(0)).noalias() = w.matrix(w.dim(0)) * x.matrix(x.dim(0));
	return y;
}

// ---------------------------------------------------------------------------
// 1D convolution (cross-correlation)

struct ConvOptions {
	Index stride = 1;
	Index dilation = 1;
	Index padding = 0;
	Index groups = 1;
};

inline Index conv_output_length(Index t_in, Index k, const ConvOptions& o) {
	return (t_in + 2 * o.padding - o.dilation * (k - 1) - 1) / o.stride + 1;
}

/// Padding that preserves length at stride 1 for odd kernels.
inline Index same_padding(Index k, Index dilation = 1) {
	return dilation * (k - 1) / 2;
}

namespace detail {

inline void check_conv(Index d_in, Index t_in, Index d_out, Index w_in, Index k, const ConvOptions& o) {
	if (o.groups < 1 || d_in % o.groups != 0 || d_out % o.groups != 0)
		throw ShapeError("conv1d: channels " + std::to_string(d_in) + "->" + std::to_string(d_out) +
				" not divisible by groups " + std::to_string(o.groups));
	if (w_in != d_in / o.groups)
		throw ShapeError("conv1d: weight expects " + std::to_string(w_in) + " input channels per group, input has " +
				std::to_string(d_in / o.groups));
	if (o.stride < 1 || o.dilation < 1 || o.padding < 0 || k < 1)
		throw ShapeError("conv1d: invalid stride/dilation/padding");
	const Index t_out = (t_in + 2 * o.padding - o.dilation * (k - 1) - 1);
	if (t_out < 0)
		throw ShapeError("conv1d: output length < 1 for input length " + std::to_string(t_in));
}

/// Gather a (c_in * k) x t_out patch matrix for channels [c0, c0 + c_in).
template<typename Scalar>
void im2col(const Scalar* x, Index t_in, Index c0, Index c_in, Index k, const ConvOptions& o, Index t_out,
		Scalar* cols) {
	for (Index c = 0; c < c_in; ++c) {
		const Scalar* xc = x + (c0 + c) * t_in;
		for (Index kk = 0; kk < k; ++kk) {
			Scalar* row = cols + (c * k + kk) * t_out;
			const Index offset = kk * o.dilation - o.padding;
			for (Index t = 0; t < t_out; ++t) {
				const Index src = t * o.stride + offset;
				row[t] = (src >= 0 && src < t_in) ? xc[src] : Scalar(0);
			}
		}
	}
}

template<typename Scalar>
void col2im_add(const Scalar* cols, Index t_in, Index c0, Index c_in, Index k, const ConvOptions& o, Index t_out,
		Scalar* gx) {
	for (Index c = 0; c < c_in; ++c) {
		Scalar* gc = gx + (c0 + c) * t_in;
		for (Index kk = 0; kk < k; ++kk) {
			const Scalar* row = cols + (c * k + kk) * t_out;
			const Index offset = kk * o.dilation - o.padding;
			for (Index t = 0; t < t_out; ++t) {
				const Index src = t * o.stride + offset;
				if (src >= 0 && src < t_in) gc[src] += row[t];
			}
		}
	}
}

inline bool is_pointwise(Index k, const ConvOptions& o) {
	return k == 1 && o.stride == 1 && o.padding == 0;
}

/**
 * Forward convolution of one sample: x is d_in x t_in, w is d_out x (d_in/groups) x k,
 * y (d_out x t_out) is overwritten. `scratch` is reused across calls.
 */
template<typename Scalar>
void conv1d_sample(const Scalar* x, Index d_in, Index t_in, const Scalar* w, Index d_out, Index k,
		const Scalar* bias, const ConvOptions& o, Index t_out, Scalar* y, std::vector<Scalar>& scratch) {
	const Index g = o.groups, cin = d_in / g, cout = d_out / g;
	if (cin == 1 && cout == 1) {
		for (Index c = 0; c < d_out; ++c) {
			const Scalar* xc = x + c * t_in;
			const Scalar* wc = w + c * k;
			Scalar* yc = y + c * t_out;
			const Scalar b = bias ? bias[c] : Scalar(0);
			for (Index t = 0; t < t_out; ++t) {
				Scalar acc = 0;
				for (Index kk = 0; kk < k; ++kk) {
					const Index src = t * o.stride + kk * o.dilation - o.padding;
					if (src >= 0 && src < t_in) acc += wc[kk] * xc[src];
				}
				yc[t] = acc + b;
			}
		}
		return;
	}
	const bool pointwise = is_pointwise(k, o);
	for (Index gi = 0; gi < g; ++gi) {
		const Scalar* cols;
		if (pointwise) {
			cols = x + gi * cin * t_in;
		} else {
			scratch.resize(static_cast<std::size_t>(cin * k * t_out));
			im2col(x, t_in, gi * cin, cin, k, o, t_out, scratch.data());
			cols = scratch.data();
		}
		ConstMatrixMap<Scalar> wm(w + gi * cout * cin * k, cout, cin * k);
		ConstMatrixMap<Scalar> cm(cols, cin * k, t_out);
		MatrixMap<Scalar> ym(y + gi * cout * t_out, cout, t_out);
		ym.noalias() = wm * cm;
	}
	if (bias)
		for (Index c = 0; c < d_out; ++c) {
			Scalar* yc = y + c * t_out;
			for (Index t = 0; t < t_out; ++t) yc[t] += bias[c];
		}
}

/// Accumulating backward of conv1d_sample. Null output pointers are skipped.
template<typename Scalar>
void conv1d_sample_backward(const Scalar* x, Index d_in, Index t_in, const Scalar* w, Index d_out, Index k,
		const ConvOptions& o, Index t_out, const Scalar* gy, Scalar* gx, Scalar* gw, Scalar* gbias,
		std::vector<Scalar>& scratch) {
	const Index g = o.groups, cin = d_in / g, cout = d_out / g;
	if (gbias)
		for (Index c = 0; c < d_out; ++c) {
			const Scalar* gyc = gy + c * t_out;
			Scalar acc = 0;
			for (Index t = 0; t < t_out; ++t) acc += gyc[t];
			gbias[c] += acc;
		}
	if (cin == 1 && cout == 1) {
		for (Index c = 0; c < d_out; ++c) {
			const Scalar* xc = x + c * t_in;
			const Scalar* wc = w + c * k;
			const Scalar* gyc = gy + c * t_out;
			for (Index kk = 0; kk < k; ++kk) {
				Scalar acc = 0;
				for (Index t = 0; t < t_out; ++t) {
					const Index src = t * o.stride + kk * o.dilation - o.padding;
					if (src >= 0 && src < t_in) {
						acc += gyc[t] * xc[src];
						if (gx) gx[c * t_in + src] += gyc[t] * wc[kk];
					}
				}
				if (gw) gw[c * k + kk] += acc;
			}
		}
		return;
	}
	const bool pointwise = is_pointwise(k, o);
	for (Index gi = 0; gi < g; ++gi) {
		ConstMatrixMap<Scalar> gym(gy + gi * cout * t_out, cout, t_out);
		if (gw) {
			const Scalar* cols;
			if (pointwise) {
				cols = x + gi * cin * t_in;
			} else {
				scratch.resize(static_cast<std::size_t>(cin * k * t_out));
				im2col(x, t_in, gi * cin, cin, k, o, t_out, scratch.data());
				cols = scratch.data();
			}
			ConstMatrixMap<Scalar> cm(cols, cin * k, t_out);
			MatrixMap<Scalar> gwm(gw + gi * cout * cin * k, cout, cin * k);
			gwm.noalias() += gym * cm.transpose();
		}
		if (gx) {
			ConstMatrixMap<Scalar> wm(w + gi * cout * cin * k, cout, cin * k);
			if (pointwise) {
				MatrixMap<Scalar> gxm(gx + gi * cin * t_in, cin, t_in);
				gxm.noalias() += wm.transpose() * gym;
			} else {
				scratch.resize(static_cast<std::size_t>(cin * k * t_out));
				MatrixMap<Scalar> gcm(scratch.data(), cin * k, t_out);
				gcm.noalias() = wm.transpose() * gym;
				col2im_add(scratch.data(), t_in, gi * cin, cin, k, o, t_out, gx);
			}
		}
	}
}

} // namespace detail

/**
 * 1D cross-correlation of x (d_in x t_in) with w (d_out x d_in/groups x k),
 * zero padding on both sides. `bias` may be empty (rank 0) for no bias.
 */
template<typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& bias,
		const ConvOptions& o = {}) {
	if (x.rank() != 2) throw ShapeError("conv1d: input must be d_in x t, got " + shape_str(x.shape()));
	if (w.rank() != 3) throw ShapeError("conv1d: weight must be d_out x d_in/groups x k");
	const Index d_in = x.dim(0), t_in = x.dim(1), d_out = w.dim(0), k = w.dim(2);
	detail::check_conv(d_in, t_in, d_out, w.dim(1), k, o);
	const bool has_bias = bias.rank() > 0;
	if (has_bias && (bias.rank() != 1 || bias.dim(0) != d_out))
		throw ShapeError("conv1d: bias must have length d_out");
	const Index t_out = conv_output_length(t_in, k, o);
	Tensor<Scalar> y({d_out, t_out});
	std::vector<Scalar> scratch;
	detail::conv1d_sample(x.data(), d_in, t_in, w.data(), d_out, k, has_bias ? bias.data() : nullptr, o, t_out,
			y.data(), scratch);
	return y;
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolMode { max, avg };

inline Index pool_output_length(Index t, Index kernel, Index stride) {
	return (t - kernel) / stride + 1;
}

/// Windowed per-channel reduction over x (d x t); trailing partial windows are dropped.
template<typename Scalar>
Tensor<Scalar> pool1d(const Tensor<Scalar>& x, PoolMode mode, Index kernel, Index stride) {
	if (x.rank() != 2) throw ShapeError("pool1d: input must be d x t");
	const Index d = x.dim(0), t = x.dim(1);
	if (kernel < 1 || stride < 1 || kernel > t)
		throw ShapeError("pool1d: kernel " + std::to_string(kernel) + " exceeds length " + std::to_string(t));
	const Index t_out = pool_output_length(t, kernel, stride);
	Tensor<Scalar> y({d, t_out});
	for (Index c = 0; c < d; ++c)
		for (Index j = 0; j < t_out; ++j) {
			const Scalar* w = x.data() + c * t + j * stride;
			Scalar acc = w[0];
			for (Index i = 1; i < kernel; ++i)
				acc = mode == PoolMode::max ? std::max(acc, w[i]) : acc + w[i];
			y(c, j) = mode == PoolMode::max ? acc : acc / static_cast<Scalar>(kernel);
		}
	return y;
}

/// Full-length reduction of x (d x t) to a length-d vector.
template<typename Scalar>
Tensor<Scalar> global_pool(const Tensor<Scalar>& x, PoolMode mode) {
	if (x.rank() != 2) throw ShapeError("global_pool: input must be d x t");
	auto y = pool1d(x, mode, x.dim(1), x.dim(1));
	return std::move(y).reshaped({x.dim(0)});
}

// ---------------------------------------------------------------------------
// Interpolation

namespace detail {

struct InterpTap {
	Index lo, hi;
	double frac;
};

/// Endpoint-aligned sampling positions for resampling t -> t_target.
inline std::vector<InterpTap> interp_taps(Index t, Index t_target) {
	std::vector<InterpTap> taps(static_cast<std::size_t>(t_target));
	for (Index i = 0; i < t_target; ++i) {
		if (t == 1 || t_target == 1) {
			taps[static_cast<std::size_t>(i)] = {0, 0, 0.0};
			continue;
		}
		const double pos = static_cast<double>(i) * static_cast<double>(t - 1) / static_cast<double>(t_target - 1);
		Index lo = static_cast<Index>(std::floor(pos));
		lo = std::min(lo, t - 1);
		const Index hi = std::min(lo + 1, t - 1);
		taps[static_cast<std::size_t>(i)] = {lo, hi, pos - static_cast<double>(lo)};
	}
	return taps;
}

} // namespace detail

/// Per-channel piecewise-linear resampling of x (d x t) to t_target samples.
template<typename Scalar>
Tensor<Scalar> linear_interpolate(const Tensor<Scalar>& x, Index t_target) {
	if (x.rank() != 2 || t_target < 1) throw ShapeError("linear_interpolate: input must be d x t, t_target >= 1");
	const Index d = x.dim(0), t = x.dim(1);
	const auto taps = detail::interp_taps(t, t_target);
	Tensor<Scalar> y({d, t_target});
	for (Index c = 0; c < d; ++c) {
		const Scalar* xc = x.data() + c * t;
		for (Index i = 0; i < t_target; ++i) {
			const auto& tp = taps[static_cast<std::size_t>(i)];
			const Scalar f = static_cast<Scalar>(tp.frac);
			y(c, i) = (Scalar(1) - f) * xc[tp.lo] + f * xc[tp.hi];
		}
	}
	return y;
}

} // namespace hkecg
