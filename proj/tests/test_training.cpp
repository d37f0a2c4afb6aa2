#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <cmath>
#include <numeric>

#include "hkecg/training.hpp"

using namespace hkecg;
using hktest::random_extent;
using hktest::random_tensor;

namespace {

/// Small variant of each backbone; widths divide every n in {1, 2, 4}.
ModelConfig tiny(Backbone b, Index n) {
	ModelConfig cfg;
	cfg.backbone = b;
	cfg.n = n;
	cfg.leads = 2;
	cfg.head_widths = {8, 4};
	switch (b) {
	case Backbone::multiscopic:
		cfg.base_width = 8;
		cfg.kernels = {3, 3, 3};
		break;
	case Backbone::resnet:
		cfg.base_width = 8;
		cfg.widths = {8, 16};
		cfg.kernels = {3, 3};
		cfg.stem_kernel = 3;
		break;
	case Backbone::densenet:
		cfg.base_width = 8;
		cfg.growth = 4;
		cfg.dense_layers = 2;
		cfg.dense_blocks = 2;
		cfg.dense_kernel = 3;
		cfg.stem_kernel = 3;
		break;
	}
	return cfg;
}

constexpr Backbone all_backbones[] = {Backbone::multiscopic, Backbone::resnet, Backbone::densenet};

/// Scalar parameter with a fixed gradient.
struct Toy {
	Parameter<double> theta;
	AdamW<double> opt;

	Toy(double value, AdamWConfig cfg) : theta(Tensor<double>::vector({value})), opt(cfg) { opt.add("theta", theta); }

	void step(double g) {
		theta.grad = Tensor<double>::vector({g});
		opt.step();
	}
	double value() const { return theta.value[0]; }
	double v_max() const { return opt.slots()[0].v_max[0]; }
};

std::vector<Example> random_examples(Rng& rng, Index count, Index leads, Index length) {
	std::vector<Example> out;
	for (Index i = 0; i < count; ++i) {
		Example e{random_tensor<float>(rng, {leads, length}, -0.3, 0.3), Tensor<float>({1, length})};
		// Runs of 16 samples labelled by the sign of a lead-0 offset.
		for (Index t0 = 0; t0 < length; t0 += 16) {
			const bool on = rng.uniform() < 0.5;
			for (Index t = t0; t < std::min(length, t0 + 16); ++t) {
				e.x(0, t) += on ? 0.8f : -0.8f;
				e.y[t] = on ? 1.0f : 0.0f;
			}
		}
		out.push_back(std::move(e));
	}
	return out;
}

} // namespace

TEST_CASE("asymmetric loss examples") {
	Tape<double> tape;
	const auto half = tape.variable(Tensor<double>::vector({0.5}));
	CHECK(asymmetric_loss(half, Tensor<double>::vector({1.0})).value()[0] == doctest::Approx(0.693147180559945).epsilon(1e-12));

	const auto small = tape.variable(Tensor<double>::vector({0.01, 0.05, 0.03}));
	CHECK(asymmetric_loss(small, Tensor<double>::vector({0, 0, 0})).value()[0] == 0.0);

	Rng rng(3);
	for (int trial = 0; trial < 50; ++trial) {
		const Index n = random_extent(rng, 1, 40);
		auto p = random_tensor<double>(rng, {n}, 1e-4, 1 - 1e-4);
		Tensor<double> y({n});
		for (auto& v : y.values()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
		Tape<double> t;
		const double asl = asymmetric_loss(t.variable(p), y, AslParams{0, 0, 0}).value()[0];
		std::vector<float> pf(p.values().begin(), p.values().end()), yf(y.values().begin(), y.values().end());
		double bce = 0.0;
		for (Index i = 0; i < n; ++i) bce -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
		CHECK(asl == doctest::Approx(bce / static_cast<double>(n)).epsilon(1e-9));
		CHECK(binary_cross_entropy(pf, yf) == doctest::Approx(bce / static_cast<double>(n)).epsilon(1e-5));
		CHECK(asymmetric_loss(t.variable(p), y).value()[0] >= 0.0);
	}
}

TEST_CASE("asymmetric loss clamps extreme probabilities") {
	Tape<double> tape;
	const auto p = tape.variable(Tensor<double>::vector({0.0, 1.0}));
	const double loss = asymmetric_loss(p, Tensor<double>::vector({1.0, 0.0}), AslParams{0, 0, 0}).value()[0];
	CHECK(std::isfinite(loss));
	CHECK(loss == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
}

TEST_CASE("adamw examples") {
	Toy still(0.7, AdamWConfig{});
	for (int i = 0; i < 5; ++i) still.step(0.0);
	CHECK(still.value() == 0.7);

	Toy one(0.0, AdamWConfig{});
	one.step(1.0);
	// lr * 1 / (1 + eps)
	CHECK(one.value() == doctest::Approx(-1e-4 / (1 + 1e-8)).epsilon(1e-12));

	// Grads [3, 1]: v = 0.009 then 0.999 * 0.009 + 0.001 = 0.009991, so v still grows.
	Toy grow(0.0, AdamWConfig{});
	grow.step(3.0);
	CHECK(grow.v_max() == doctest::Approx(0.009).epsilon(1e-12));
	grow.step(1.0);
	CHECK(grow.opt.slots()[0].v[0] == doctest::Approx(0.009991).epsilon(1e-12));
	CHECK(grow.v_max() == doctest::Approx(0.009991).epsilon(1e-12));

	// Grads [3, 0]: v falls to 0.008991 and the running maximum keeps 0.009.
	Toy keep(0.0, AdamWConfig{});
	keep.step(3.0);
	keep.step(0.0);
	CHECK(keep.opt.slots()[0].v[0] == doctest::Approx(0.008991).epsilon(1e-12));
	CHECK(keep.v_max() == doctest::Approx(0.009).epsilon(1e-12));
	CHECK(keep.opt.step_count() == 2);
}

TEST_CASE("adamw decoupled weight decay") {
	AdamWConfig cfg;
	cfg.lr = 0.01;
	cfg.weight_decay = 0.5;
	Toy toy(2.0, cfg);
	toy.step(0.0);
	CHECK(toy.value() == doctest::Approx(2.0 * (1 - 0.01 * 0.5)).epsilon(1e-15));

	// The decay does not enter the moments.
	Toy both(2.0, cfg);
	both.step(1.0);
	CHECK(both.opt.slots()[0].m[0] == doctest::Approx(0.1).epsilon(1e-12));
	CHECK(both.value() == doctest::Approx(2.0 * 0.995 - 0.01 / (1 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw decreases a convex quadratic") {
	Rng rng(4);
	for (int trial = 0; trial < 100; ++trial) {
		const double a = rng.uniform(0.5, 4.0), c = rng.uniform(-3, 3), x0 = rng.uniform(-5, 5);
		if (std::abs(x0 - c) < 0.1) continue;
		AdamWConfig cfg;
		cfg.lr = 0.05;
		Toy toy(x0, cfg);
		auto f = [&](double x) { return 0.5 * a * (x - c) * (x - c); };
		const double before = f(toy.value());
		toy.step(a * (toy.value() - c));
		CHECK(f(toy.value()) < before);
	}
}

TEST_CASE("amsgrad maximum never decreases") {
	Rng rng(5);
	Parameter<double> p(random_tensor<double>(rng, {7}, -1, 1));
	AdamW<double> opt(AdamWConfig{});
	opt.add("p", p);
	Tensor<double> last({7});
	for (int step = 0; step < 1000; ++step) {
		Tensor<double> g({7});
		const double scale = std::exp(rng.uniform(-6, 3));
		for (auto& v : g.values()) v = rng.normal() * scale;
		p.grad = g;
		opt.step();
		const auto& s = opt.slots()[0];
		for (Index i = 0; i < 7; ++i) {
			CHECK(s.v_max[i] >= last[i]);
			CHECK(s.v_max[i] >= s.v[i]);
		}
		last = s.v_max;
	}
}

TEST_CASE("adamw rejects non-finite gradients") {
	Parameter<float> a(Tensor<float>::vector({1.0f})), b(Tensor<float>::vector({1.0f, 2.0f}));
	AdamW<float> opt(AdamWConfig{});
	opt.add("head.fc_out.weight", a);
	opt.add("cnn.block2.pw", b);
	a.grad = Tensor<float>::vector({0.5f});
	b.grad = Tensor<float>::vector({0.5f, std::nanf("")});
	try {
		opt.step();
		FAIL("expected NumericError");
	} catch (const NumericError& e) {
		CHECK(std::string(e.what()).find("cnn.block2.pw") != std::string::npos);
	}
	CHECK(a.value[0] == 1.0f);
	CHECK(opt.step_count() == 0);
}

TEST_CASE("dropout") {
	Rng rng(6);
	const auto x = random_tensor<double>(rng, {4, 50}, -2, 2);
	Tape<double> tape;
	const auto v = tape.constant(x);
	CHECK(ops::dropout(v, 0.2, false, rng).value() == x);
	CHECK(ops::dropout(v, 0.0, true, rng).value() == x);
	CHECK(ops::dropout(v, 0.0, false, rng).value() == x);

	const Tensor<double> ones({100000}, 1.0);
	const auto y = ops::dropout(tape.constant(ones), 0.2, true, rng).value();
	double mean = 0.0;
	Index zeros = 0, other = 0;
	for (double e : y.values()) {
		mean += e;
		zeros += e == 0.0;
		other += e != 0.0 && e != 1.25;
	}
	CHECK(other == 0);
	CHECK(mean / 1e5 == doctest::Approx(1.0).epsilon(0.02));
	CHECK(static_cast<double>(zeros) / 1e5 == doctest::Approx(0.2).epsilon(0.05));
	CHECK_THROWS_AS(ops::dropout(v, 1.0, true, rng), UsageError);
}

TEST_CASE("early stopping rule") {
	EarlyStopping worse(2, true);
	CHECK(worse.update(1, 0.5));
	CHECK_FALSE(worse.update(2, 0.6));
	CHECK_FALSE(worse.should_stop());
	CHECK_FALSE(worse.update(3, 0.7));
	CHECK(worse.should_stop());
	CHECK(worse.best_epoch() == 1);
	CHECK_THROWS_AS(EarlyStopping(0, true), ConfigError);

	EarlyStopping higher(1, false);
	higher.update(1, 0.5);
	CHECK(higher.update(2, 0.6));
	CHECK_FALSE(higher.update(3, 0.6)); // ties do not improve
	CHECK(higher.should_stop());
}

TEST_CASE("early stopping never picks a later epoch than the best") {
	Rng rng(7);
	for (int trial = 0; trial < 200; ++trial) {
		const int patience = static_cast<int>(random_extent(rng, 1, 5));
		const bool lower = rng.uniform() < 0.5;
		EarlyStopping s(patience, lower);
		std::vector<double> seen;
		int epoch = 0;
		while (!s.should_stop() && epoch < 40) {
			seen.push_back(rng.uniform());
			s.update(++epoch, seen.back());
		}
		const auto best = lower ? std::min_element(seen.begin(), seen.end()) : std::max_element(seen.begin(), seen.end());
		CHECK(s.best_epoch() == static_cast<int>(best - seen.begin()) + 1);
		CHECK(s.best() == *best);
	}
}

TEST_CASE("train stops after patience and restores the best weights") {
	Rng rng(8);
	const auto data = random_examples(rng, 6, 2, 32);
	auto cfg = tiny(Backbone::multiscopic, 2);
	Model<float> model(cfg);
	TrainConfig tc;
	tc.batch_size = 4;
	tc.max_epochs = 10;
	tc.patience = 2;
	tc.optimizer.lr = 1e-2;
	ModelState<float> after_first;
	int calls = 0;
	const auto result = train(
			model, data, [&](Model<float>&) { return static_cast<double>(++calls); }, true, tc,
			[&](const EpochRecord& r) {
				if (r.epoch == 1) after_first = model.state();
			});
	CHECK(result.history.size() == 3);
	CHECK(result.best_epoch == 1);
	CHECK(result.best_metric == 1.0);
	CHECK(result.history[0].improved);
	CHECK_FALSE(result.history[2].improved);
	CHECK(model.state() == after_first);
	CHECK(result.history[0].lr == 1e-2);
}

TEST_CASE("train errors") {
	Model<float> model(tiny(Backbone::multiscopic, 1));
	const auto validate = [](Model<float>&) { return 0.0; };
	TrainConfig tc;
	CHECK_THROWS_AS(train(model, {}, validate, true, tc), ConfigError);
	tc.patience = 0;
	Rng rng(9);
	CHECK_THROWS_AS(train(model, random_examples(rng, 2, 2, 32), validate, true, tc), ConfigError);

	TrainConfig ok;
	ok.max_epochs = 1;
	auto reg = model.registry();
	reg.parameters.back().param->value[0] = std::nanf("");
	CHECK_THROWS_AS(train(model, random_examples(rng, 2, 2, 32), validate, true, ok), NumericError);
}

TEST_CASE("training is deterministic") {
	Rng rng(10);
	const auto data = random_examples(rng, 10, 2, 48);
	TrainConfig tc;
	tc.batch_size = 4;
	tc.max_epochs = 3;
	tc.seed = 77;
	tc.optimizer.lr = 1e-3;
	auto run = [&] {
		Model<float> model(tiny(Backbone::resnet, 2));
		const auto r = train(
				model, data, [](Model<float>& m) { return static_cast<double>(m.state().parameters[0][0]); }, true, tc);
		return std::pair{r, model.state()};
	};
	const auto [a, sa] = run();
	const auto [b, sb] = run();
	REQUIRE(a.history.size() == b.history.size());
	for (std::size_t i = 0; i < a.history.size(); ++i) {
		CHECK(a.history[i].train_loss == b.history[i].train_loss);
		CHECK(a.history[i].val_metric == b.history[i].val_metric);
	}
	CHECK(sa == sb);
}

TEST_CASE("tiny models pass grad_check") {
	for (Backbone b : all_backbones) {
		for (Index n : {1, 2}) {
			auto cfg = tiny(b, n);
			cfg.dropout = 0.0;
			cfg.seed = 12;
			Model<double> model(cfg);
			Rng rng(13);
			const auto x = random_tensor<double>(rng, {2, 2, 32}, -1, 1);
			const auto w = random_tensor<double>(rng, {2, 1, 32}, -1, 1);
			std::vector<Parameter<double>*> params;
			for (auto& p : model.registry().parameters) params.push_back(p.param);
			const double err = grad_check_parameters(
					[&](Tape<double>& tape) {
						ForwardContext ctx{true, &rng};
						return ops::weighted_sum(model.forward(tape, tape.constant(x), ctx), w);
					},
					params);
			INFO(std::string(to_string(b)), " n=", n);
			CHECK(err < 1e-4);
		}
	}
}

TEST_CASE("every backbone overfits a fixed batch") {
	Rng rng(14);
	const auto data = random_examples(rng, 16, 2, 64);
	std::vector<std::size_t> order(16);
	std::iota(order.begin(), order.end(), 0);
	const auto [x, y] = stack_batch(data, order, 0, 16);
	for (Backbone b : all_backbones) {
		for (Index n : {1, 2, 4}) {
			auto cfg = tiny(b, n);
			cfg.dropout = 0.0;
			Model<float> model(cfg);
			AdamWConfig oc;
			oc.lr = 3e-3;
			AdamW<float> opt(model.registry(), oc);
			AslParams loss_params{0, 0, 0};
			double first = 0.0, last = 0.0;
			Rng drop(0);
			for (int step = 0; step < 200; ++step) {
				Tape<float> tape;
				ForwardContext ctx{true, &drop};
				const auto out = model.forward(tape, tape.constant(x), ctx);
				const auto loss = asymmetric_loss(out, y.reshaped(out.shape()), loss_params);
				(step == 0 ? first : last) = loss.value()[0];
				opt.zero_grad();
				tape.backward(loss);
				opt.step();
			}
			INFO(std::string(to_string(b)), " n=", n, " first=", first, " last=", last);
			CHECK(last <= 0.5 * first);
		}
	}
}

TEST_CASE("constant model scores chance level") {
	SynthSpec spec;
	spec.duration_s = 20;
	const auto ds = synth_generate(spec, 15);
	const auto records = preprocess(ds.records, Task::detect);
	Model<float> model(tiny(Backbone::multiscopic, 2));
	for (auto& p : model.registry().parameters)
		if (p.name.rfind("head.fc_out", 0) == 0) p.param->value *= 0.0f;
	TrainConfig tc;
	tc.window_s = 10;
	tc.hop_s = 5;
	const auto report = evaluate(model, records, tc);
	CHECK(report.uar == 0.5);
	CHECK(report.bce == doctest::Approx(std::log(2.0)).epsilon(1e-6));
	CHECK(report.excluded.empty());
	CHECK(report.to_json().at("s_af") == report.score.s_af);
	for (const auto& p : report.predictions) CHECK(p.rhythm == Rhythm::persistent);
}

TEST_CASE("examples and prediction windows cover records") {
	SynthSpec spec;
	spec.duration_s = 23;
	const auto ds = synth_generate(spec, 16);
	const auto records = preprocess(ds.records, Task::detect);
	const auto cfg = resolve(tiny(Backbone::multiscopic, 1));
	TrainConfig tc;
	tc.window_s = 10;
	tc.hop_s = 5;
	const auto ex = make_examples(records, cfg, tc);
	// floor((23 - 10) / 5) + 1 windows per record
	CHECK(ex.size() == 3 * records.size());
	CHECK(ex[0].x.shape() == Shape{2, 2000});
	CHECK(ex[0].y.shape() == Shape{1, 2000});

	Model<float> model(cfg);
	const auto out = predict_records(model, records, tc);
	REQUIRE(out.size() == records.size());
	for (std::size_t i = 0; i < out.size(); ++i) {
		CHECK(static_cast<Index>(out[i].prob.size()) == records[i].length());
		for (float p : out[i].prob) CHECK((p > 0.0f && p < 1.0f));
	}

	auto wrong = records;
	wrong[0].signal = Tensor<float>({3, records[0].length()});
	CHECK_THROWS_AS(make_examples(wrong, cfg, tc), DataError);
}
