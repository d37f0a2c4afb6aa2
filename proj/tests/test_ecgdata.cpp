#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "support.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "hkecg/ecgdata.hpp"

using namespace hkecg;
using hktest::random_extent;
using hktest::random_tensor;
using Json = nlohmann::json;

namespace {

std::filesystem::path scratch_dir(const std::string& leaf) {
	auto dir = std::filesystem::temp_directory_path() / "hkecg_test_ecgdata" / leaf;
	std::filesystem::remove_all(dir);
	std::filesystem::create_directories(dir);
	return dir;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
	std::ofstream(p, std::ios::trunc) << text;
}

EcgRecord blank_record(Index T, double fs, Index leads = 2) {
	EcgRecord rec;
	rec.id = "r";
	rec.patient = "p";
	rec.fs = fs;
	rec.signal = Tensor<float>({leads, T});
	for (Index i = 0; i < rec.signal.size(); ++i) rec.signal[i] = static_cast<float>(i % 97);
	rec.af_mask.assign(static_cast<std::size_t>(T), 0);
	return rec;
}

double amplitude(std::span<const float> x, std::size_t trim) {
	float m = 0;
	for (std::size_t i = trim; i + trim < x.size(); ++i) m = std::max(m, std::abs(x[i]));
	return m;
}

Tensor<float> sinusoid(double freq, double fs, Index T) {
	Tensor<float> s({1, T});
	for (Index i = 0; i < T; ++i)
		s[i] = static_cast<float>(std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(i) / fs));
	return s;
}

double coefficient_of_variation(const std::vector<double>& v) {
	double mean = 0;
	for (double x : v) mean += x;
	mean /= static_cast<double>(v.size());
	double sq = 0;
	for (double x : v) sq += (x - mean) * (x - mean);
	return std::sqrt(sq / static_cast<double>(v.size())) / mean;
}

double mean_abs_rr_deviation(const EcgRecord& rec) {
	std::vector<double> rr;
	for (std::size_t i = 1; i < rec.r_peaks.size(); ++i) rr.push_back(static_cast<double>(rec.r_peaks[i] - rec.r_peaks[i - 1]));
	std::vector<double> sorted = rr;
	std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
	const double median = sorted[sorted.size() / 2];
	double acc = 0;
	for (double r : rr) acc += std::abs(r - median);
	return acc / static_cast<double>(rr.size()) / median;
}

} // namespace

TEST_CASE("butterworth design") {
	const auto sos = butter_bandpass(3, 0.5, 45.0, 200.0);
	REQUIRE(sos.size() == 3);
	CHECK(sos_gain(sos, 10.0, 200.0) == doctest::Approx(0.999996677).epsilon(1e-8));
	CHECK(sos_gain(sos, 95.0, 200.0) == doctest::Approx(2.95438098e-4).epsilon(1e-6));
	CHECK(sos_gain(sos, 0.5, 200.0) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-9));
	CHECK(sos_gain(sos, 45.0, 200.0) == doctest::Approx(std::sqrt(0.5)).epsilon(1e-9));
	CHECK(sos_gain(sos, 0.0, 200.0) < 1e-12);
	for (const auto& s : sos) CHECK(s[3] == 1.0);
	CHECK_THROWS_AS(butter_bandpass(3, 0.5, 45.0, 90.0), ConfigError);
	CHECK_THROWS_AS(bandpass(Tensor<float>({1, 100}), 90.0), ConfigError);
}

TEST_CASE("zero-phase filtering matches a reference implementation") {
	// Reference: scipy.signal.sosfiltfilt(butter(3, [0.5, 45], 'band', fs=200, output='sos'), x).
	std::vector<double> x(400);
	for (std::size_t i = 0; i < x.size(); ++i) {
		const double t = static_cast<double>(i);
		x[i] = std::sin(0.05 * t) + 0.5 * std::cos(2.9 * t) + 0.01 * t * static_cast<double>(i % 7);
	}
	const auto y = sosfiltfilt(butter_bandpass(3, 0.5, 45.0, 200.0), x);
	const std::pair<std::size_t, double> expected[] = {{0, -0.09083144164617821}, {1, -0.4970235550286981},
			{50, -0.35714980761916637}, {199, -1.279978068855512}, {300, 3.0229636395205235},
			{398, 15.446050749439113}, {399, -0.9280725997111299}};
	for (const auto& [i, v] : expected) CHECK(y[i] == doctest::Approx(v).epsilon(1e-9));
}

TEST_CASE("bandpass examples") {
	const double fs = 200;
	const auto pass = bandpass(sinusoid(10, fs, 4000), fs);
	CHECK(std::abs(amplitude(pass.values(), 400) - 1.0) < 0.05);
	const auto stop = bandpass(sinusoid(95, fs, 4000), fs);
	CHECK(amplitude(stop.values(), 400) <= 0.1);
	const auto dc = bandpass(Tensor<float>({2, 4000}, 3.0f), fs);
	CHECK(amplitude(dc.values().subspan(0, 4000), 400) < 0.05);
	CHECK(amplitude(dc.values().subspan(4000), 400) < 0.05);
}

TEST_CASE("bandpass is zero phase") {
	// A symmetric pulse stays symmetric around its centre.
	Tensor<float> pulse({1, 2001});
	for (Index i = 0; i < 2001; ++i) pulse[i] = static_cast<float>(std::exp(-0.5 * std::pow((i - 1000) / 4.0, 2)));
	const auto y = bandpass(pulse, 200.0);
	Index peak = 0;
	for (Index i = 1; i < 2001; ++i)
		if (y[i] > y[peak]) peak = i;
	CHECK(peak == 1000);
	for (Index d = 1; d < 200; ++d) CHECK(std::abs(y[1000 - d] - y[1000 + d]) < 1e-4f);
}

TEST_CASE("zscore") {
	const auto z = zscore(Tensor<float>({1, 3}, std::vector<float>{1, 2, 3}));
	CHECK(z.signal[0] == doctest::Approx(-1.2247449).epsilon(1e-6));
	CHECK(z.signal[1] == doctest::Approx(0.0));
	CHECK(z.signal[2] == doctest::Approx(1.2247449).epsilon(1e-6));
	CHECK_FALSE(z.flat[0]);

	const auto flat = zscore(Tensor<float>({2, 3}, std::vector<float>{5, 5, 5, 1, 2, 3}));
	CHECK(flat.flat[0]);
	CHECK_FALSE(flat.flat[1]);
	for (Index i = 0; i < 3; ++i) CHECK(flat.signal[i] == 0.0f);

	Rng rng(1);
	for (int trial = 0; trial < 20; ++trial) {
		const Index d = random_extent(rng, 1, 4), T = random_extent(rng, 2, 3000);
		const auto x = random_tensor<float>(rng, {d, T}, -50, 80);
		const auto once = zscore(x).signal;
		for (Index c = 0; c < d; ++c) {
			double mean = 0, sq = 0;
			for (Index t = 0; t < T; ++t) mean += once(c, t);
			mean /= static_cast<double>(T);
			for (Index t = 0; t < T; ++t) sq += (once(c, t) - mean) * (once(c, t) - mean);
			CHECK(std::abs(mean) < 1e-6);
			CHECK(std::abs(std::sqrt(sq / static_cast<double>(T)) - 1.0) < 1e-6);
		}
		CHECK(max_abs_diff(zscore(once).signal, once) < 1e-6f);
	}
}

TEST_CASE("segmentation") {
	auto check_starts = [](Index seconds, std::vector<Index> starts) {
		auto rec = blank_record(seconds * 200, 200);
		rec.r_peaks = {10, 3500, 6100};
		const auto seg = segment(rec);
		REQUIRE(seg.segments.size() == starts.size());
		for (std::size_t i = 0; i < starts.size(); ++i) {
			CHECK(seg.segments[i].start == starts[i]);
			CHECK(seg.segments[i].signal.dim(1) == 6000);
			CHECK(seg.segments[i].af_mask.size() == 6000);
		}
	};
	check_starts(60, {0, 3000, 6000});
	check_starts(30, {0});
	check_starts(44, {0});

	auto rec = blank_record(60 * 200, 200);
	rec.r_peaks = {10, 3500, 6100};
	rec.af_mask[3500] = 1;
	const auto seg = segment(rec);
	CHECK(seg.segments[1].r_peaks == std::vector<Index>{500, 3100});
	CHECK(seg.segments[1].af_mask[500] == 1);
	CHECK(seg.segments[1].signal(1, 0) == rec.signal(1, 3000));
	CHECK(seg.segments[1].parent == "r");

	const auto short_rec = segment(blank_record(20 * 200, 200));
	CHECK(short_rec.segments.empty());
	CHECK(short_rec.too_short);
}

TEST_CASE("segments cover everything but a short tail") {
	Rng rng(2);
	for (int trial = 0; trial < 100; ++trial) {
		const Index T = random_extent(rng, 6000, 40000);
		const auto seg = segment(blank_record(T, 200, 1));
		const Index count = (T - 6000) / 3000 + 1;
		REQUIRE(static_cast<Index>(seg.segments.size()) == count);
		std::vector<bool> covered(static_cast<std::size_t>(T), false);
		for (const auto& s : seg.segments)
			for (Index i = s.start; i < s.start + 6000; ++i) covered[static_cast<std::size_t>(i)] = true;
		const auto first_gap = std::find(covered.begin(), covered.end(), false);
		CHECK(std::all_of(first_gap, covered.end(), [](bool c) { return !c; }));
		CHECK(covered.end() - first_gap < 3000);
	}
}

TEST_CASE("centre crop") {
	CHECK(center_crop(blank_record(2000, 200)).start == 0);
	CHECK(center_crop(blank_record(15000, 500)).start == 5000);
	const auto crop = center_crop(blank_record(5500, 500));
	CHECK(crop.start == 250);
	CHECK(crop.signal.dim(1) == 5000);
	CHECK_THROWS_AS(center_crop(blank_record(1999, 200)), DataError);
}

TEST_CASE("rhythm derivation") {
	CHECK(derive_rhythm(Mask{0, 0, 0}) == Rhythm::non_af);
	CHECK(derive_rhythm(Mask{1, 1, 1}) == Rhythm::persistent);
	CHECK(derive_rhythm(Mask{0, 0, 1, 1, 0}) == Rhythm::paf);
	CHECK_THROWS_AS(derive_rhythm(Mask{}), UsageError);
	CHECK(parse_rhythm(to_string(Rhythm::paf)) == Rhythm::paf);
	CHECK_THROWS_AS(parse_rhythm("flutter"), DataError);
}

TEST_CASE("channel padding") {
	Rng rng(3);
	const auto x = random_tensor<float>(rng, {2, 50});
	const auto p = pad_channels(x, 4);
	REQUIRE(p.shape() == Shape{4, 50});
	double in = 0, out = 0;
	for (float v : x.values()) in += v;
	for (float v : p.values()) out += v;
	CHECK(in == out);
	for (Index t = 0; t < 50; ++t) {
		CHECK(p(2, t) == 0.0f);
		CHECK(p(3, t) == 0.0f);
		CHECK(p(0, t) == x(0, t));
	}
	CHECK(pad_channels(x, 2) == x);
	CHECK_THROWS_AS(pad_channels(x, 1), UsageError);
}

TEST_CASE("mask intervals") {
	const Mask m{0, 1, 1, 0, 0, 1};
	const auto iv = mask_intervals(m);
	CHECK(iv == std::vector<std::pair<Index, Index>>{{1, 3}, {5, 6}});
	CHECK(intervals_mask(iv, 6) == m);
	CHECK_THROWS_AS(intervals_mask({{4, 8}}, 6), DataError);
}

TEST_CASE("synthetic data") {
	SynthSpec spec;
	const auto a = synth_generate(spec, 7);
	CHECK(a == synth_generate(spec, 7));
	CHECK_FALSE(a == synth_generate(spec, 8));
	REQUIRE(a.records.size() == 10);

	std::vector<double> af_rr, sinus_rr;
	std::vector<double> sinus_dev, af_dev;
	for (const auto& rec : a.records) {
		rec.validate();
		CHECK(rec.length() == 6000);
		REQUIRE(rec.rhythm.has_value());
		CHECK(derive_rhythm(rec.af_mask) == *rec.rhythm);
		if (*rec.rhythm == Rhythm::paf) {
			const auto eps = mask_intervals(rec.af_mask);
			CHECK(eps.size() >= 1);
			CHECK(eps.size() <= 3);
			for (const auto& [on, off] : eps) CHECK(off - on >= 5 * 200);
		}
		for (std::size_t i = 1; i < rec.r_peaks.size(); ++i) {
			const auto p0 = static_cast<std::size_t>(rec.r_peaks[i - 1]), p1 = static_cast<std::size_t>(rec.r_peaks[i]);
			const double rr = static_cast<double>(p1 - p0);
			if (rec.af_mask[p0] && rec.af_mask[p1])
				af_rr.push_back(rr);
			else if (!rec.af_mask[p0] && !rec.af_mask[p1])
				sinus_rr.push_back(rr);
		}
		if (*rec.rhythm == Rhythm::non_af) sinus_dev.push_back(mean_abs_rr_deviation(rec));
		if (*rec.rhythm == Rhythm::persistent) af_dev.push_back(mean_abs_rr_deviation(rec));
	}
	// Sinus rate differs between records, so variability is measured per record for sinus stretches.
	for (const auto& rec : a.records) {
		if (*rec.rhythm != Rhythm::non_af) continue;
		std::vector<double> rr;
		for (std::size_t i = 1; i < rec.r_peaks.size(); ++i)
			rr.push_back(static_cast<double>(rec.r_peaks[i] - rec.r_peaks[i - 1]));
		CHECK(coefficient_of_variation(rr) <= 0.05);
	}
	for (const auto& rec : a.records) {
		if (*rec.rhythm != Rhythm::persistent) continue;
		std::vector<double> rr;
		for (std::size_t i = 1; i < rec.r_peaks.size(); ++i)
			rr.push_back(static_cast<double>(rec.r_peaks[i] - rec.r_peaks[i - 1]));
		CHECK(coefficient_of_variation(rr) >= 0.15);
	}
	CHECK(coefficient_of_variation(af_rr) >= 0.15);
	CHECK(*std::max_element(sinus_dev.begin(), sinus_dev.end()) + 0.05 <
			*std::min_element(af_dev.begin(), af_dev.end()));
}

TEST_CASE("synthetic classes separate across seeds") {
	SynthSpec spec;
	spec.non_af = 10;
	spec.paf = 0;
	spec.persistent = 10;
	for (std::uint64_t seed = 0; seed < 5; ++seed) {
		const auto ds = synth_generate(spec, seed);
		double sinus_max = 0, af_min = 1e9;
		for (const auto& rec : ds.records) {
			const double dev = mean_abs_rr_deviation(rec);
			if (*rec.rhythm == Rhythm::non_af)
				sinus_max = std::max(sinus_max, dev);
			else
				af_min = std::min(af_min, dev);
		}
		CHECK(sinus_max + 0.05 < af_min);
	}
}

TEST_CASE("synth spec json") {
	SynthSpec spec;
	spec.paf = 9;
	CHECK(synth_spec_from_json(to_json(spec)) == spec);
	CHECK_THROWS_AS(synth_spec_from_json(Json{{"pafs", 3}}), ConfigError);
}

TEST_CASE("bundle round trip") {
	SynthSpec spec;
	spec.records_per_patient = 2;
	const auto ds = synth_generate(spec, 3);
	const auto dir = scratch_dir("bundle");
	save_bundle(ds, dir);
	CHECK(load_bundle(dir) == ds);

	SUBCASE("non-monotone r-peaks name the record") {
		const auto ann_path = dir / (ds.records[1].id + ".ann.json");
		Json ann = Json::parse(std::ifstream(ann_path));
		ann["r_peaks"] = {100, 90};
		write_file(ann_path, ann.dump());
		try {
			load_bundle(dir);
			FAIL("expected a parse error");
		} catch (const DataError& e) {
			CHECK(std::string(e.what()).find(ds.records[1].id) != std::string::npos);
		}
	}
	SUBCASE("malformed manifest") {
		write_file(dir / "manifest.json", "{\"name\": ");
		CHECK_THROWS_AS(load_bundle(dir), DataError);
		write_file(dir / "manifest.json", "{\"name\": \"x\"}");
		CHECK_THROWS_AS(load_bundle(dir), DataError);
	}
	SUBCASE("truncated signal") {
		std::filesystem::resize_file(dir / (ds.records[0].id + ".f32"), 100);
		CHECK_THROWS_AS(load_bundle(dir), DataError);
	}
	SUBCASE("interval beyond the record") {
		const auto ann_path = dir / (ds.records[0].id + ".ann.json");
		Json ann = Json::parse(std::ifstream(ann_path));
		ann["af_intervals"] = {{10, 999999}};
		write_file(ann_path, ann.dump());
		CHECK_THROWS_AS(load_bundle(dir), DataError);
	}
	SUBCASE("contradictory rhythm label") {
		const auto ann_path = dir / (ds.records[0].id + ".ann.json");
		Json ann = Json::parse(std::ifstream(ann_path));
		ann["rhythm_label"] = "persistent";
		ann["af_intervals"] = Json::array();
		write_file(ann_path, ann.dump());
		CHECK_THROWS_AS(load_bundle(dir), DataError);
	}
}

TEST_CASE("csv import") {
	const auto dir = scratch_dir("csv");
	std::string csv = "t,I,II\n";
	for (int i = 0; i < 400; ++i) csv += std::to_string(i / 200.0) + "," + std::to_string(0.5 * i) + ",-1.25\n";
	write_file(dir / "a.csv", csv);
	write_file(dir / "a.json", R"({"af_intervals": [[100, 300]], "r_peaks": [50, 150, 250], "rhythm_label": "paf",
			"class_labels": ["AF"], "patient": "pat1"})");
	const auto rec = import_csv(dir / "a.csv", dir / "a.json", "a");
	CHECK(rec.fs == 200.0);
	CHECK(rec.patient == "pat1");
	CHECK(rec.leads == std::vector<std::string>{"I", "II"});
	CHECK(rec.signal(0, 3) == 1.5f);
	CHECK(rec.signal(1, 399) == -1.25f);
	CHECK(rec.af_mask[100] == 1);
	CHECK(rec.af_mask[300] == 0);
	CHECK(rec.rhythm == Rhythm::paf);

	write_file(dir / "bad.json", R"({"r_peaks": [100, 90]})");
	try {
		import_csv(dir / "a.csv", dir / "bad.json", "rec42");
		FAIL("expected a parse error");
	} catch (const DataError& e) {
		CHECK(std::string(e.what()).find("rec42") != std::string::npos);
	}
	write_file(dir / "header.csv", "time,I\n0,1\n");
	CHECK_THROWS_AS(import_csv(dir / "header.csv", dir / "a.json", "h"), DataError);
	write_file(dir / "ragged.csv", "t,I,II\n0,1,2\n0.005,1\n");
	CHECK_THROWS_AS(import_csv(dir / "ragged.csv", dir / "a.json", "g"), DataError);
	write_file(dir / "text.csv", "t,I\n0,abc\n");
	CHECK_THROWS_AS(import_csv(dir / "text.csv", dir / "a.json", "x"), DataError);
	CHECK_THROWS_AS(import_csv(dir / "missing.csv", dir / "a.json", "m"), DataError);
}

TEST_CASE("patient split") {
	const auto ds = synth_generate(SynthSpec{}, 1);
	const auto split = split_by_patient(ds, 5);
	CHECK(split.train.size() == 4);
	CHECK(split.val.size() == 3);
	CHECK(split.test.size() == 3);

	SynthSpec bigger;
	bigger.records_per_patient = 3;
	bigger.non_af = 7;
	bigger.paf = 5;
	bigger.persistent = 6;
	const auto big = synth_generate(bigger, 2);
	for (std::uint64_t seed = 0; seed < 200; ++seed) {
		const auto s = split_by_patient(big, seed);
		std::set<std::string> seen[3];
		const std::vector<std::size_t>* parts[3] = {&s.train, &s.val, &s.test};
		std::size_t total = 0;
		for (int p = 0; p < 3; ++p) {
			total += parts[p]->size();
			for (auto i : *parts[p]) seen[p].insert(big.records[i].patient);
		}
		CHECK(total == big.records.size());
		for (int p = 0; p < 3; ++p)
			for (int q = p + 1; q < 3; ++q)
				for (const auto& id : seen[p]) CHECK(seen[q].count(id) == 0);
	}
	CHECK(split_by_patient(big, 9).train == split_by_patient(big, 9).train);
	CHECK_THROWS_AS(split_by_patient(big, 1, {0.5, 0.5, 0.5}), ConfigError);
}

TEST_CASE("preprocessing pipelines") {
	const auto ds = synth_generate(SynthSpec{}, 4);
	const auto& rec = ds.records[0];
	const auto det = preprocess_detection(rec);
	CHECK(det.signal == zscore(bandpass(rec.signal, rec.fs)).signal);
	CHECK(det.r_peaks == rec.r_peaks);
	CHECK(det.af_mask == rec.af_mask);
	CHECK(preprocess_detection(rec).signal == det.signal);
	CHECK(preprocess_classification(rec).signal == zscore(rec.signal).signal);
}
