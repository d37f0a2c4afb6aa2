#pragma once

#include <doctest.h>

#include "hkecg/rng.hpp"
#include "hkecg/tensor.hpp"

namespace hktest {

using hkecg::Index;
using hkecg::Shape;
using hkecg::Tensor;

template<typename Scalar = double>
Tensor<Scalar> random_tensor(hkecg::Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
	Tensor<Scalar> t(std::move(shape));
	for (auto& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
	return t;
}

/// Values bounded away from zero so relu kinks stay out of finite-difference stencils.
template<typename Scalar = double>
Tensor<Scalar> offset_tensor(hkecg::Rng& rng, Shape shape) {
	Tensor<Scalar> t(std::move(shape));
	for (auto& v : t.values()) {
		const double m = rng.uniform(0.1, 1.0);
		v = static_cast<Scalar>(rng.uniform() < 0.5 ? -m : m);
	}
	return t;
}

inline Index random_extent(hkecg::Rng& rng, Index lo, Index hi) {
	return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

} // namespace hktest
