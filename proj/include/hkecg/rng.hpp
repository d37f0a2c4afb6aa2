#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace hkecg {

/**
 * Seeded generator with distribution code owned here (not by the standard
 * library) so that sampled values do not depend on the toolchain.
 */
class Rng {
public:
	explicit Rng(std::uint64_t seed = 0) : engine_(seed) { }

	std::uint64_t next() { return engine_(); }

	/// Uniform in [0, 1) with 53 random bits.
	double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

	double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

	/// Uniform integer in [0, n).
	std::uint64_t below(std::uint64_t n) {
		const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
		std::uint64_t v;
		do v = engine_();
		while (v >= limit);
		return v % n;
	}

	double normal() {
		if (has_spare_) {
			has_spare_ = false;
			return spare_;
		}
		double u1;
		do u1 = uniform();
		while (u1 <= 0.0);
		const double u2 = uniform();
		const double r = std::sqrt(-2.0 * std::log(u1));
		spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
		has_spare_ = true;
		return r * std::cos(2.0 * std::numbers::pi * u2);
	}

	double normal(double mean, double stddev) { return mean + stddev * normal(); }

	template<typename It>
	void shuffle(It first, It last) {
		const auto n = last - first;
		for (auto i = n - 1; i > 0; --i) {
			const auto j = static_cast<decltype(i)>(below(static_cast<std::uint64_t>(i + 1)));
			std::swap(first[i], first[j]);
		}
	}

private:
	std::mt19937_64 engine_;
	double spare_ = 0.0;
	bool has_spare_ = false;
};

} // namespace hkecg
