#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include "hkecg/layers.hpp"

using namespace hkecg;
using hktest::random_extent;
using hktest::random_tensor;

namespace {

template<typename Scalar>
Tensor<Scalar> run(Module<Scalar>& m, const Tensor<Scalar>& x, bool training = false) {
	Tape<Scalar> tape;
	tape.set_grad_enabled(false);
	ForwardContext ctx{training, nullptr};
	return m.forward(tape, tape.constant(x), ctx).value();
}

template<typename Scalar>
void randomise(Module<Scalar>& m, Rng& rng) {
	Registry<Scalar> reg;
	m.collect(reg, "");
	for (auto& p : reg.parameters)
		for (auto& v : p.param->value.values()) v = static_cast<Scalar>(rng.uniform(-1.0, 1.0));
}

/// Elementwise Kronecker sum: H[j*p + r, l*q + s, k] = sum_i A_i[j,l] B_i[r,s,k].
Tensor<double> kron_sum_oracle(const Tensor<double>& a, const Tensor<double>& b) {
	const Index n = a.dim(0), p = b.dim(1), q = b.dim(2), k = b.rank() == 4 ? b.dim(3) : 1;
	Shape shape{n * p, n * q};
	if (b.rank() == 4) shape.push_back(k);
	Tensor<double> h(shape);
	for (Index i = 0; i < n; ++i)
		for (Index j = 0; j < n; ++j)
			for (Index l = 0; l < n; ++l)
				for (Index r = 0; r < p; ++r)
					for (Index s = 0; s < q; ++s)
						for (Index kk = 0; kk < k; ++kk)
							h[((j * p + r) * n * q + (l * q + s)) * k + kk] +=
									a(i, j, l) * b[((i * p + r) * q + s) * k + kk];
	return h;
}

} // namespace

TEST_CASE("build_weight shapes and oracle") {
	Rng rng(1);
	PHC<double> fig(2, 8, 6, 1);
	fig.init(rng);
	CHECK(fig.build_weight().shape() == Shape{6, 8, 1});
	CHECK(fig.filters().shape() == Shape{2, 3, 4, 1});
	CHECK(fig.algebra().shape() == Shape{2, 2, 2});

	PHM<double> one(1, 3, 5);
	one.init(rng);
	const auto h1 = one.build_weight();
	for (Index r = 0; r < 5; ++r)
		for (Index c = 0; c < 3; ++c) CHECK(h1(r, c) == one.algebra().value[0] * one.blocks().value[r * 3 + c]);

	PHM<double> three(3, 9, 6);
	three.init(rng);
	CHECK(max_abs_diff(three.build_weight(), kron_sum_oracle(three.algebra().value, three.blocks().value)) < 1e-15);
	PHC<double> conv3(3, 6, 9, 3);
	conv3.init(rng);
	CHECK(max_abs_diff(conv3.build_weight(), kron_sum_oracle(conv3.algebra().value, conv3.filters().value)) < 1e-15);
}

TEST_CASE("ph width validation") {
	CHECK_THROWS_AS(PHM<float>(4, 6, 8), ConfigError);
	CHECK_THROWS_AS(PHM<float>(4, 8, 6), ConfigError);
	CHECK_THROWS_AS(PHC<float>(3, 4, 6, 3), ConfigError);
	CHECK_THROWS_AS(PHM<float>(0, 4, 4), ConfigError);
	CHECK_THROWS_AS(PHC<float>(2, 4, 4, 3, {1, 1, 0, 2}), ConfigError);
	CHECK_THROWS_AS(SEBlock<float>(4, 18), ConfigError);
	CHECK_THROWS_AS(SEBlock<float>(1, 4), ConfigError);
}

TEST_CASE("phm forward") {
	Rng rng(2);
	SUBCASE("n=1 reproduces a dense layer") {
		PHM<double> phm(1, 5, 3);
		Dense<double> fc(5, 3);
		randomise(fc, rng);
		phm.algebra().value[0] = 1.0;
		phm.blocks().value = fc.weight().value.reshaped({1, 3, 5});
		phm.bias()->value = fc.bias()->value;
		const auto x = random_tensor(rng, {4, 5});
		CHECK(run(phm, x) == run(fc, x));
	}
	SUBCASE("zero input and bias give zero output") {
		PHM<double> phm(2, 4, 6);
		phm.init(rng);
		const auto y = run(phm, Tensor<double>({2, 4}));
		for (double v : y.values()) CHECK(v == 0.0);
	}
	SUBCASE("matches the materialised weight") {
		PHM<double> phm(2, 4, 4);
		randomise(phm, rng);
		const auto x = random_tensor(rng, {1, 4, 5});
		const auto y = run(phm, x);
		const auto h = phm.build_weight();
		const auto expected = matmul(h, x.reshaped({4, 5}));
		for (Index c = 0; c < 4; ++c)
			for (Index t = 0; t < 5; ++t) CHECK(y(0, c, t) == doctest::Approx(expected(c, t) + phm.bias()->value[c]).epsilon(1e-14));
	}
	SUBCASE("channel mismatch") {
		PHM<double> phm(2, 4, 4);
		CHECK_THROWS_AS(run(phm, Tensor<double>({1, 6})), ShapeError);
	}
}

TEST_CASE("phc forward") {
	Rng rng(3);
	SUBCASE("n=1 reproduces a convolution scaled by the algebra scalar") {
		PHC<double> phc(1, 3, 4, 5, {1, 1, 2, 1});
		randomise(phc, rng);
		Conv<double> conv(3, 4, 5, {1, 1, 2, 1});
		conv.weight().value = phc.filters().value.reshaped({4, 3, 5});
		conv.weight().value *= phc.algebra().value[0];
		conv.bias()->value = phc.bias()->value;
		const auto x = random_tensor(rng, {2, 3, 12});
		CHECK(max_abs_diff(run(phc, x), run(conv, x)) < 1e-14);
	}
	SUBCASE("k=1 equals phm per time step") {
		PHC<double> phc(2, 4, 6, 1);
		PHM<double> phm(2, 4, 6);
		randomise(phc, rng);
		phm.algebra().value = phc.algebra().value;
		phm.blocks().value = phc.filters().value.reshaped({2, 3, 2});
		phm.bias()->value = phc.bias()->value;
		const auto x = random_tensor(rng, {2, 4, 7});
		CHECK(max_abs_diff(run(phc, x), run(phm, x)) < 1e-6);
	}
	SUBCASE("matches the materialised-weight convolution") {
		PHC<double> phc(2, 4, 6, 3);
		randomise(phc, rng);
		const auto x = random_tensor(rng, {1, 4, 10});
		const auto expected = conv1d(x.reshaped({4, 10}), phc.build_weight(), phc.bias()->value);
		CHECK(max_abs_diff(run(phc, x).reshaped({6, 8}), expected) < 1e-14);
	}
	SUBCASE("channel mismatch") {
		PHC<double> phc(2, 4, 6, 3);
		CHECK_THROWS_AS(run(phc, Tensor<double>({1, 2, 10})), ShapeError);
	}
}

TEST_CASE("n=1 ph layers are functionally identical to real layers") {
	Rng rng(4);
	for (int trial = 0; trial < 20; ++trial) {
		const Index d_in = random_extent(rng, 1, 16), d_out = random_extent(rng, 1, 16);
		PHM<float> phm(1, d_in, d_out);
		Dense<float> fc(d_in, d_out);
		randomise(fc, rng);
		phm.algebra().value[0] = 1.0f;
		phm.blocks().value = fc.weight().value.reshaped({1, d_out, d_in});
		phm.bias()->value = fc.bias()->value;
		const auto x = random_tensor<float>(rng, {3, d_in, 4});
		CHECK(max_abs_diff(run(phm, x), run(fc, x)) < 1e-6f);

		const Index k = random_extent(rng, 1, 5);
		const ConvOptions o{1, 1, same_padding(k), 1};
		PHC<float> phc(1, d_in, d_out, k, o);
		Conv<float> conv(d_in, d_out, k, o);
		randomise(conv, rng);
		phc.algebra().value[0] = 1.0f;
		phc.filters().value = conv.weight().value.reshaped({1, d_out, d_in, k});
		phc.bias()->value = conv.bias()->value;
		const auto xc = random_tensor<float>(rng, {2, d_in, 9});
		CHECK(max_abs_diff(run(phc, xc), run(conv, xc)) < 1e-6f);
	}
}

TEST_CASE("squeeze and excitation") {
	Rng rng(5);
	SUBCASE("zero mixing weights halve the input") {
		SEBlock<double> se(1, 16);
		Registry<double> reg;
		se.collect(reg, "");
		for (auto& p : reg.parameters) p.param->value.fill(0);
		const auto x = random_tensor(rng, {2, 16, 8});
		const auto y = run(se, x);
		for (Index i = 0; i < x.size(); ++i) CHECK(y[i] == x[i] / 2);
	}
	SUBCASE("step-by-step oracle") {
		SEBlock<double> se(1, 16);
		randomise(se, rng);
		const auto x = random_tensor(rng, {1, 16, 8});
		auto& l1 = dynamic_cast<Dense<double>&>(se.reduce());
		auto& l2 = dynamic_cast<Dense<double>&>(se.expand());
		CHECK(se.hidden() == 2);
		const auto squeeze = global_pool(x.reshaped({16, 8}), PoolMode::avg);
		Tensor<double> hidden({2});
		for (Index h = 0; h < 2; ++h) {
			double acc = l1.bias()->value[h];
			for (Index c = 0; c < 16; ++c) acc += l1.weight().value(h, c) * squeeze[c];
			hidden[h] = std::max(acc, 0.0);
		}
		const auto y = run(se, x);
		for (Index c = 0; c < 16; ++c) {
			double acc = l2.bias()->value[c];
			for (Index h = 0; h < 2; ++h) acc += l2.weight().value(c, h) * hidden[h];
			const double gate = 1.0 / (1.0 + std::exp(-acc));
			for (Index t = 0; t < 8; ++t) CHECK(y(0, c, t) == doctest::Approx(x(0, c, t) * gate).epsilon(1e-14));
		}
	}
	SUBCASE("constant channels squeeze to their value") {
		Tensor<double> x({1, 3, 5});
		for (Index c = 0; c < 3; ++c)
			for (Index t = 0; t < 5; ++t) x(0, c, t) = static_cast<double>(c) - 0.5;
		const auto s = global_pool(x.reshaped({3, 5}), PoolMode::avg);
		for (Index c = 0; c < 3; ++c) CHECK(s[c] == doctest::Approx(static_cast<double>(c) - 0.5));
	}
	SUBCASE("gate never amplifies") {
		for (Index n : {1, 2, 4}) {
			SEBlock<float> se(n, 32);
			se.init(rng);
			const auto x = random_tensor<float>(rng, {2, 32, 6}, -5, 5);
			const auto y = run(se, x);
			CHECK(y.shape() == x.shape());
			for (Index i = 0; i < x.size(); ++i) CHECK(std::abs(y[i]) <= std::abs(x[i]));
		}
	}
	SUBCASE("ph hidden widths") {
		CHECK(SEBlock<float>(4, 64).hidden() == 8);
		CHECK(dynamic_cast<PHM<float>*>(&SEBlock<float>(4, 64).reduce()) != nullptr);
		// 144 / 8 = 18 is not a multiple of 12 and rounds to the nearest one.
		CHECK(SEBlock<float>(12, 144).hidden() == 24);
		CHECK(SEBlock<float>(2, 48).hidden() == 6);
		CHECK(dynamic_cast<Dense<float>*>(&SEBlock<float>(12, 144, 8, true).reduce()) != nullptr);
	}
}

TEST_CASE("parameter counts") {
	Dense<float> fc(64, 64);
	PHM<float> phm(4, 64, 64);
	CHECK(param_count(fc) == 4160);
	CHECK(param_count(phm) == 1152);
	CHECK(phm_param_count(4, 64, 64) == 1152);
	CHECK(reduction_ratio(1152, 4160) == doctest::Approx(0.277).epsilon(0.001));

	PHC<float> phc(2, 16, 32, 11);
	Conv<float> conv(16, 32, 11);
	CHECK(param_count(phc) == 2856);
	CHECK(param_count(conv) == 5664);
	CHECK(phc_param_count(2, 16, 32, 11) == 2856);
	CHECK(reduction_ratio(2856, 5664) == doctest::Approx(0.504).epsilon(0.001));
	CHECK(param_count(*make_conv<float>(4, 16, 16, 3, {1, 1, 1, 16})) == 16 * 3 + 16);
}

TEST_CASE("closed forms and the mild-assumption ratio bound") {
	Rng rng(6);
	for (int trial = 0; trial < 200; ++trial) {
		const Index n = random_extent(rng, 1, 6);
		const Index d_in = n * random_extent(rng, 1, 8), d_out = n * random_extent(rng, 1, 8);
		PHM<float> phm(n, d_in, d_out);
		CHECK(param_count(phm) == phm_param_count(n, d_in, d_out));
		PHM<float> no_bias(n, d_in, d_out, false);
		CHECK(param_count(no_bias) == n * n * n + d_out * d_in / n);
		const Index k = random_extent(rng, 1, 7);
		PHC<float> phc(n, d_in, d_out, k);
		CHECK(param_count(phc) == phc_param_count(n, d_in, d_out, k));
		if (d_out * d_in >= n * n * n * n) {
			const double ratio = reduction_ratio(param_count(no_bias), d_out * d_in);
			CHECK(ratio > 1.0 / static_cast<double>(n) - 1e-12);
			CHECK(ratio <= 1.0 / static_cast<double>(n) + 2.0 * n * n * n / static_cast<double>(d_out * d_in) + 1e-12);
		}
	}
}

TEST_CASE("he-normal initialisation") {
	Rng rng(7);
	Dense<double> fc(200, 500);
	fc.init(rng);
	double sq = 0;
	for (double w : fc.weight().value.values()) sq += w * w;
	const double std = std::sqrt(sq / static_cast<double>(fc.weight().size()));
	CHECK(std::abs(std - 0.1) < 0.005);
	for (double b : fc.bias()->value.values()) CHECK(b == 0.0);

	PHC<double> phc(4, 40, 40, 5);
	phc.init(rng);
	double fsq = 0;
	for (double w : phc.filters().value.values()) fsq += w * w;
	CHECK(std::abs(std::sqrt(fsq / static_cast<double>(phc.filters().size())) - 0.1) < 0.01);
	for (double a : phc.algebra().value.values()) CHECK(std::abs(a) <= 1.0);
	for (double b : phc.bias()->value.values()) CHECK(b == 0.0);

	PHM<float> a(2, 8, 8), b(2, 8, 8);
	Rng r1(42), r2(42);
	a.init(r1);
	b.init(r2);
	CHECK(a.algebra().value == b.algebra().value);
	CHECK(a.blocks().value == b.blocks().value);
}

TEST_CASE("no dead ph parameters") {
	Rng rng(8);
	PHM<double> phm(2, 4, 6);
	PHC<double> phc(3, 6, 3, 3, {1, 1, 1, 1});
	phm.init(rng);
	phc.init(rng);
	for (auto* p : {phm.bias(), phc.bias()})
		for (auto& v : p->value.values()) v = rng.uniform(-1, 1);
	Tape<double> tape;
	ForwardContext ctx;
	const auto y1 = phm.forward(tape, tape.constant(random_tensor(rng, {3, 4})), ctx);
	const auto y2 = phc.forward(tape, tape.constant(random_tensor(rng, {2, 6, 5})), ctx);
	tape.backward(ops::add(ops::weighted_sum(ops::mish(y1), random_tensor(rng, y1.shape())),
			ops::weighted_sum(ops::mish(y2), random_tensor(rng, y2.shape()))));
	for (auto* p : {&phm.algebra(), &phm.blocks(), phm.bias(), &phc.algebra(), &phc.filters(), phc.bias()}) {
		REQUIRE(p->grad.has_value());
		for (double g : p->grad->values()) CHECK(g != 0.0);
	}
}

TEST_CASE("depth-wise convolutions stay real") {
	auto dw = make_conv<float>(4, 16, 16, 3, {1, 1, 1, 16});
	CHECK(dw->kind() == "conv");
	CHECK_FALSE(dw->is_ph());
	CHECK(make_conv<float>(4, 16, 16, 1)->kind() == "phc");
	CHECK(make_channel_mix<float>(1, 16, 16)->kind() == "fc");
	CHECK(make_channel_mix<float>(2, 16, 16)->kind() == "phm");
}
