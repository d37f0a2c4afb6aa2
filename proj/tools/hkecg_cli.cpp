// hkecg: synthetic data, training, evaluation and scoring from the command line.

#include <array>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hkecg/checkpoint.hpp"
#include "hkecg/training.hpp"

namespace fs = std::filesystem;
using namespace hkecg;
using Json = nlohmann::json;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, data_error = 3, numeric_error = 4 };

void require_keys(const Json& j, const std::set<std::string>& known, const std::string& section) {
	if (!j.is_object()) throw ConfigError(section + ": expected an object");
	for (const auto& [key, value] : j.items())
		if (!known.count(key)) throw ConfigError(section + ": unknown key '" + key + "'");
}

Json read_json(const fs::path& path) {
	std::ifstream in(path);
	if (!in) throw ConfigError("cannot open '" + path.string() + "'");
	try {
		return Json::parse(in);
	} catch (const Json::exception& e) {
		throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
	}
}

void write_text(const fs::path& path, const std::string& text) {
	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	if (!out) throw DataError("cannot write '" + path.string() + "'");
	out << text;
}

// ---------------------------------------------------------------------------
// Run configuration

struct DataSection {
	std::optional<std::string> path;
	std::optional<SynthSpec> synth;
	std::uint64_t synth_seed = 0;
	std::uint64_t split_seed = 0;
	std::array<double, 3> fractions{0.4, 0.3, 0.3};
};

struct RunConfig {
	DataSection data;
	ModelConfig model;
	TrainConfig train;
	std::string output_dir = "run";
};

Json to_json(const DataSection& d) {
	Json j{{"synth_seed", d.synth_seed}, {"split_seed", d.split_seed}, {"fractions", d.fractions}};
	if (d.path) j["path"] = *d.path;
	if (d.synth) j["synth"] = hkecg::to_json(*d.synth);
	return j;
}

DataSection data_from_json(const Json& j) {
	require_keys(j, {"path", "synth", "synth_seed", "split_seed", "fractions"}, "data");
	DataSection d;
	if (j.contains("path")) d.path = j.at("path").get<std::string>();
	if (j.contains("synth")) d.synth = synth_spec_from_json(j.at("synth"));
	if (d.path.has_value() == d.synth.has_value()) throw ConfigError("data: give exactly one of 'path' and 'synth'");
	d.synth_seed = j.value("synth_seed", d.synth_seed);
	d.split_seed = j.value("split_seed", d.split_seed);
	if (j.contains("fractions")) d.fractions = j.at("fractions").get<std::array<double, 3>>();
	for (double f : d.fractions)
		if (f < 0.0) throw ConfigError("data: fractions must be non-negative");
	return d;
}

Json to_json(const TrainConfig& t) {
	return Json{{"batch_size", t.batch_size}, {"max_epochs", t.max_epochs}, {"patience", t.patience},
			{"lr", t.optimizer.lr}, {"beta1", t.optimizer.beta1}, {"beta2", t.optimizer.beta2}, {"eps", t.optimizer.eps},
			{"weight_decay", t.optimizer.weight_decay}, {"gamma_pos", t.loss.gamma_pos}, {"gamma_neg", t.loss.gamma_neg},
			{"asl_margin", t.loss.margin}, {"seed", t.seed}, {"window_s", t.window_s}, {"hop_s", t.hop_s},
			{"crop_s", t.crop_s}, {"class_names", t.class_names}};
}

TrainConfig train_from_json(const Json& j) {
	require_keys(j,
			{"batch_size", "max_epochs", "patience", "lr", "beta1", "beta2", "eps", "weight_decay", "gamma_pos",
					"gamma_neg", "asl_margin", "seed", "window_s", "hop_s", "crop_s", "class_names"},
			"train");
	TrainConfig t;
	t.batch_size = j.value("batch_size", t.batch_size);
	t.max_epochs = j.value("max_epochs", t.max_epochs);
	t.patience = j.value("patience", t.patience);
	t.optimizer.lr = j.value("lr", t.optimizer.lr);
	t.optimizer.beta1 = j.value("beta1", t.optimizer.beta1);
	t.optimizer.beta2 = j.value("beta2", t.optimizer.beta2);
	t.optimizer.eps = j.value("eps", t.optimizer.eps);
	t.optimizer.weight_decay = j.value("weight_decay", t.optimizer.weight_decay);
	t.loss.gamma_pos = j.value("gamma_pos", t.loss.gamma_pos);
	t.loss.gamma_neg = j.value("gamma_neg", t.loss.gamma_neg);
	t.loss.margin = j.value("asl_margin", t.loss.margin);
	t.seed = j.value("seed", t.seed);
	t.window_s = j.value("window_s", t.window_s);
	t.hop_s = j.value("hop_s", t.hop_s);
	t.crop_s = j.value("crop_s", t.crop_s);
	t.class_names = j.value("class_names", t.class_names);
	if (t.batch_size < 1 || t.max_epochs < 1) throw ConfigError("train: batch_size and max_epochs must be >= 1");
	if (t.patience < 1) throw ConfigError("train: patience must be >= 1");
	if (!(t.optimizer.lr > 0.0)) throw ConfigError("train: lr must be positive");
	if (t.optimizer.beta1 < 0 || t.optimizer.beta1 >= 1 || t.optimizer.beta2 < 0 || t.optimizer.beta2 >= 1)
		throw ConfigError("train: betas must be in [0, 1)");
	if (t.optimizer.weight_decay < 0 || t.loss.gamma_pos < 0 || t.loss.gamma_neg < 0 || t.loss.margin < 0 ||
			t.loss.margin >= 1)
		throw ConfigError("train: weight_decay and loss parameters must be non-negative (margin below 1)");
	if (t.window_s <= 0 || t.hop_s <= 0 || t.crop_s <= 0) throw ConfigError("train: window, hop and crop must be positive");
	return t;
}

RunConfig run_config_from_json(const Json& j) {
	require_keys(j, {"data", "model", "train", "output"}, "config");
	RunConfig rc;
	try {
		if (j.contains("data")) rc.data = data_from_json(j.at("data"));
		rc.model = resolve(model_config_from_json(j.value("model", Json::object())));
		rc.train = train_from_json(j.value("train", Json::object()));
		if (j.contains("output")) {
			require_keys(j.at("output"), {"dir"}, "output");
			rc.output_dir = j.at("output").value("dir", rc.output_dir);
		}
	} catch (const Json::exception& e) {
		throw ConfigError(std::string("config: ") + e.what());
	}
	return rc;
}

Json to_json(const RunConfig& rc) {
	return Json{{"data", to_json(rc.data)}, {"model", hkecg::to_json(rc.model)}, {"train", to_json(rc.train)},
			{"output", {{"dir", rc.output_dir}}}};
}

Dataset load_data(const DataSection& d) {
	if (d.path) return load_bundle(*d.path);
	if (d.synth) return synth_generate(*d.synth, d.synth_seed);
	throw ConfigError("config: missing 'data' section");
}

std::vector<EcgRecord> subset(const std::vector<EcgRecord>& records, const std::vector<std::size_t>& idx) {
	std::vector<EcgRecord> out;
	for (std::size_t i : idx) out.push_back(records[i]);
	return out;
}

std::string timestamp() {
	const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
	std::tm tm{};
	gmtime_r(&now, &tm);
	std::ostringstream s;
	s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
	return s.str();
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const fs::path& spec_path, std::uint64_t seed, const fs::path& out) {
	const SynthSpec spec = synth_spec_from_json(read_json(spec_path));
	const Dataset ds = synth_generate(spec, seed);
	save_bundle(ds, out);
	std::set<std::string> patients;
	for (const auto& r : ds.records) patients.insert(r.patient);
	std::cout << "wrote " << ds.records.size() << " records from " << patients.size() << " patients to " << out.string()
			  << "\n";
	return ok;
}

int cmd_train(const fs::path& config_path) {
	const RunConfig rc = run_config_from_json(read_json(config_path));
	const fs::path out = rc.output_dir;
	fs::create_directories(out);
	write_text(out / "config.resolved.json", to_json(rc).dump(2) + "\n");

	std::ofstream log(out / "train.log", std::ios::trunc);
	auto note = [&](const std::string& line) {
		log << timestamp() << " " << line << "\n";
		log.flush();
		std::cerr << line << "\n";
	};

	const Dataset ds = load_data(rc.data);
	const Split split = split_by_patient(ds, rc.data.split_seed, rc.data.fractions);
	const auto processed = preprocess(ds.records, rc.model.task);
	const auto train_records = subset(processed, split.train), val_records = subset(processed, split.val),
			   test_records = subset(processed, split.test);
	note("data: " + std::to_string(ds.records.size()) + " records; split " + std::to_string(split.train.size()) + "/" +
			std::to_string(split.val.size()) + "/" + std::to_string(split.test.size()));
	if (val_records.empty()) throw ConfigError("validation split is empty; adjust data.fractions");
	const auto examples = make_examples(train_records, rc.model, rc.train);
	note("training examples: " + std::to_string(examples.size()));

	Model<float> model(rc.model);
	const auto report = model.param_report();
	note("parameters: cnn " + std::to_string(report.cnn) + ", se " + std::to_string(report.se) + ", head " +
			std::to_string(report.head) + ", total " + std::to_string(report.total));

	std::ofstream history(out / "history.jsonl", std::ios::trunc);
	const auto validate = [&](Model<float>& m) { return validation_metric(evaluate(m, val_records, rc.train)); };
	const auto result = train(model, examples, validate, lower_is_better(rc.model.task), rc.train, [&](const EpochRecord& e) {
		history << Json{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_metric", e.val_metric}, {"lr", e.lr}}.dump()
				<< "\n";
		history.flush();
		std::ostringstream line;
		line << "epoch " << e.epoch << " train_loss " << std::setprecision(6) << e.train_loss << " val_metric "
			 << e.val_metric << (e.improved ? " *" : "");
		note(line.str());
	});

	Json meta{{"data", to_json(rc.data)}, {"train", to_json(rc.train)}, {"best_epoch", result.best_epoch},
			{"best_metric", result.best_metric}};
	save_checkpoint(out / "best.ckpt", make_checkpoint(model, meta));

	Json summary{{"best_epoch", result.best_epoch}, {"best_metric", result.best_metric},
			{"val", evaluate(model, val_records, rc.train).to_json()}};
	if (!test_records.empty()) summary["test"] = evaluate(model, test_records, rc.train).to_json();
	write_text(out / "report.json", summary.dump(2) + "\n");
	note("best epoch " + std::to_string(result.best_epoch) + "; wrote " + (out / "best.ckpt").string());
	std::cout << summary.dump(2) << "\n";
	return ok;
}

/// Rhythm-level UAR over the records a prediction set covers.
double rhythm_uar(const std::vector<RecordPrediction>& preds, const Dataset& ds) {
	std::map<std::string, const EcgRecord*> by_id;
	for (const auto& r : ds.records) by_id[r.id] = &r;
	std::vector<int> labels, guesses;
	for (const auto& p : preds) {
		const EcgRecord& rec = *by_id.at(p.id);
		labels.push_back(static_cast<int>(rec.rhythm.value_or(derive_rhythm(rec.af_mask))));
		guesses.push_back(static_cast<int>(p.rhythm));
	}
	return uar(labels, guesses, 3);
}

int cmd_eval(const std::optional<fs::path>& ckpt_path, bool oracle, const fs::path& data_dir, const std::string& split_name,
		const std::optional<fs::path>& out, const std::optional<fs::path>& pred_out) {
	const Dataset ds = load_bundle(data_dir);
	std::optional<Checkpoint> ckpt;
	TrainConfig tc;
	ModelConfig mc;
	if (ckpt_path) {
		ckpt = load_checkpoint(*ckpt_path);
		mc = ckpt->model;
		if (ckpt->meta.contains("train")) tc = train_from_json(ckpt->meta.at("train"));
	}

	std::vector<std::size_t> idx;
	if (split_name == "all") {
		for (std::size_t i = 0; i < ds.records.size(); ++i) idx.push_back(i);
	} else {
		if (!ckpt || !ckpt->meta.contains("data"))
			throw ConfigError("--split needs a checkpoint that records its data split");
		const DataSection d = data_from_json(ckpt->meta.at("data"));
		const Split s = split_by_patient(ds, d.split_seed, d.fractions);
		idx = split_name == "train" ? s.train : split_name == "val" ? s.val : s.test;
	}
	const auto records = subset(preprocess(ds.records, mc.task), idx);
	if (records.empty()) throw DataError("no records in split '" + split_name + "'");

	EvalReport report;
	if (oracle) {
		std::vector<EcgRecord> usable;
		std::vector<RecordOutput> outputs;
		for (const auto& rec : records) {
			if (!rec.has_mask()) {
				report.excluded.push_back(rec.id);
				continue;
			}
			usable.push_back(rec);
			outputs.push_back({rec.id, std::vector<float>(rec.af_mask.begin(), rec.af_mask.end())});
		}
		if (usable.empty()) throw DataError("no annotated records to evaluate");
		auto excluded = std::move(report.excluded);
		report = evaluate_outputs(mc, usable, outputs, tc);
		report.excluded = std::move(excluded);
	} else {
		Model<float> model = restore_model(*ckpt);
		report = evaluate(model, records, tc);
	}
	Json j = report.to_json();
	j["split"] = split_name;
	j["records"] = records.size() - report.excluded.size();
	if (mc.task == Task::detect) j["rhythm_uar"] = rhythm_uar(report.predictions, ds);
	if (pred_out) {
		if (mc.task != Task::detect) throw ConfigError("--pred is only available for detection models");
		write_predictions(report.predictions, *pred_out);
	}
	if (out) write_text(*out, j.dump(2) + "\n");
	std::cout << j.dump(2) << "\n";
	return ok;
}

int cmd_score(const fs::path& pred_path, const fs::path& data_dir, const std::optional<fs::path>& out) {
	const Dataset ds = load_bundle(data_dir);
	const auto preds = read_predictions(pred_path);
	Json j = to_json(score_predictions(preds, ds));
	j["rhythm_uar"] = rhythm_uar(preds, ds);
	if (out) write_text(*out, j.dump(2) + "\n");
	std::cout << j.dump(2) << "\n";
	return ok;
}

Json report_json(const ParamReport& r) {
	return Json{{"cnn", r.cnn}, {"se", r.se}, {"head", r.head}, {"total", r.total}};
}

int cmd_params(const fs::path& config_path) {
	const Json j = read_json(config_path);
	const RunConfig rc = run_config_from_json(j);
	Model<float> model(rc.model);
	ModelConfig real = rc.model;
	real.n = 1;
	const ParamReport ph = model.param_report(), base = Model<float>(real).param_report();
	Json out = report_json(ph);
	out["n"] = rc.model.n;
	out["backbone"] = to_string(rc.model.backbone);
	out["leads"] = rc.model.leads;
	out["baseline"] = report_json(base);
	out["ratio_cnn"] = static_cast<double>(ph.cnn) / static_cast<double>(base.cnn);
	out["ratio_total"] = static_cast<double>(ph.total) / static_cast<double>(base.total);
	std::cout << out.dump(2) << "\n";
	return ok;
}

template<typename F>
int guarded(F&& f) {
	try {
		return f();
	} catch (const ConfigError& e) {
		std::cerr << "config error: " << e.what() << "\n";
		return config_error;
	} catch (const UsageError& e) {
		std::cerr << "config error: " << e.what() << "\n";
		return config_error;
	} catch (const DataError& e) {
		std::cerr << "data error: " << e.what() << "\n";
		return data_error;
	} catch (const NumericError& e) {
		std::cerr << "numeric error: " << e.what() << "\n";
		return numeric_error;
	} catch (const Json::exception& e) {
		std::cerr << "data error: " << e.what() << "\n";
		return data_error;
	} catch (const fs::filesystem_error& e) {
		std::cerr << "data error: " << e.what() << "\n";
		return data_error;
	} catch (const std::exception& e) {
		std::cerr << "error: " << e.what() << "\n";
		return failure;
	}
}

} // namespace

int main(int argc, char** argv) {
	CLI::App app{"Hypercomplex ECG models: synthetic data, training, evaluation and scoring"};
	app.require_subcommand(1);

	fs::path spec, out_dir;
	std::uint64_t seed = 0;
	auto* synth = app.add_subcommand("synth", "Generate a synthetic record bundle");
	synth->add_option("--spec", spec, "Synthetic spec JSON")->required();
	synth->add_option("--seed", seed, "Generator seed");
	synth->add_option("--out", out_dir, "Bundle directory")->required();

	fs::path config;
	auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
	train_cmd->add_option("--config", config, "Run config JSON")->required();

	std::optional<fs::path> checkpoint, report_out, pred_out;
	fs::path data_dir;
	std::string split = "all";
	bool oracle = false;
	auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a bundle");
	auto* ck = eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
	auto* orc = eval->add_flag("--oracle", oracle, "Score the reference annotations as predictions");
	ck->excludes(orc);
	eval->add_option("--data", data_dir, "Bundle directory")->required();
	eval->add_option("--split", split, "Records to evaluate")->check(CLI::IsMember({"all", "train", "val", "test"}));
	eval->add_option("--out", report_out, "Write the report here as well");
	eval->add_option("--pred", pred_out, "Write per-record predictions (detection)");

	fs::path pred_in;
	std::optional<fs::path> score_out;
	auto* score = app.add_subcommand("score", "Score a prediction file against a bundle");
	score->add_option("--pred", pred_in, "Prediction JSON")->required();
	score->add_option("--data", data_dir, "Bundle directory")->required();
	score->add_option("--out", score_out, "Write the score report here as well");

	auto* params = app.add_subcommand("params", "Parameter counts against the n=1 build");
	params->add_option("--config", config, "Run config JSON")->required();

	try {
		app.parse(argc, argv);
	} catch (const CLI::ParseError& e) {
		const int code = app.exit(e);
		return code == 0 ? ok : config_error;
	}

	if (*synth) return guarded([&] { return cmd_synth(spec, seed, out_dir); });
	if (*train_cmd) return guarded([&] { return cmd_train(config); });
	if (*eval) {
		if (!checkpoint && !oracle) {
			std::cerr << "config error: eval needs --checkpoint or --oracle\n";
			return config_error;
		}
		return guarded([&] { return cmd_eval(checkpoint, oracle, data_dir, split, report_out, pred_out); });
	}
	if (*score) return guarded([&] { return cmd_score(pred_in, data_dir, score_out); });
	if (*params) return guarded([&] { return cmd_params(config); });
	return config_error;
}
