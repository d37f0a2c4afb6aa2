#include "hkecg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace hkecg {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native byte order");

namespace {

constexpr char magic[4] = {'H', 'K', 'C', 'K'};

template<typename T>
T get_or(const Json& j, const char* key, T fallback) {
	return j.contains(key) ? j.at(key).get<T>() : fallback;
}

} // namespace

Json to_json(const ModelConfig& cfg) {
	return Json{
			{"backbone", to_string(cfg.backbone)},
			{"n", cfg.n},
			{"leads", cfg.leads},
			{"task", to_string(cfg.task)},
			{"classes", cfg.classes},
			{"output", to_string(cfg.output)},
			{"dropout", cfg.dropout},
			{"seed", cfg.seed},
			{"base_width", cfg.base_width},
			{"kernels", cfg.kernels},
			{"widths", cfg.widths},
			{"stem_kernel", cfg.stem_kernel},
			{"growth", cfg.growth},
			{"dense_layers", cfg.dense_layers},
			{"dense_blocks", cfg.dense_blocks},
			{"dense_kernel", cfg.dense_kernel},
			{"head_widths", cfg.head_widths},
			{"se_reduction", cfg.se_reduction},
	};
}

ModelConfig model_config_from_json(const Json& j) {
	if (!j.is_object()) throw ConfigError("model: expected an object");
	static const std::set<std::string> known{"backbone", "n", "leads", "task", "classes", "output", "dropout", "seed",
			"base_width", "kernels", "widths", "stem_kernel", "growth", "dense_layers", "dense_blocks", "dense_kernel",
			"head_widths", "se_reduction"};
	for (const auto& [key, value] : j.items())
		if (!known.count(key)) throw ConfigError("model: unknown key '" + key + "'");
	ModelConfig cfg;
	try {
		if (j.contains("backbone")) cfg.backbone = parse_backbone(j.at("backbone").get<std::string>());
		if (j.contains("task")) cfg.task = parse_task(j.at("task").get<std::string>());
		if (j.contains("output")) cfg.output = parse_output_mode(j.at("output").get<std::string>());
		cfg.n = get_or(j, "n", cfg.n);
		cfg.leads = get_or(j, "leads", cfg.leads);
		cfg.classes = get_or(j, "classes", cfg.classes);
		cfg.dropout = get_or(j, "dropout", cfg.dropout);
		cfg.seed = get_or(j, "seed", cfg.seed);
		cfg.base_width = get_or(j, "base_width", cfg.base_width);
		cfg.kernels = get_or(j, "kernels", cfg.kernels);
		cfg.widths = get_or(j, "widths", cfg.widths);
		cfg.stem_kernel = get_or(j, "stem_kernel", cfg.stem_kernel);
		cfg.growth = get_or(j, "growth", cfg.growth);
		cfg.dense_layers = get_or(j, "dense_layers", cfg.dense_layers);
		cfg.dense_blocks = get_or(j, "dense_blocks", cfg.dense_blocks);
		cfg.dense_kernel = get_or(j, "dense_kernel", cfg.dense_kernel);
		cfg.head_widths = get_or(j, "head_widths", cfg.head_widths);
		cfg.se_reduction = get_or(j, "se_reduction", cfg.se_reduction);
	} catch (const Json::exception& e) {
		throw ConfigError(std::string("model: ") + e.what());
	}
	return cfg;
}

Checkpoint make_checkpoint(Model<float>& model, Json meta) {
	Checkpoint ckpt;
	ckpt.model = model.config();
	ckpt.meta = std::move(meta);
	auto reg = model.registry();
	for (const auto& p : reg.parameters) ckpt.names.push_back(p.name);
	for (const auto& b : reg.buffers) ckpt.names.push_back(b.name);
	ckpt.state = model.state();
	return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
	const std::size_t count = ckpt.state.parameters.size() + ckpt.state.buffers.size();
	if (ckpt.names.size() != count) throw std::logic_error("checkpoint: name count does not match tensor count");
	Json tensors = Json::array();
	auto tensor_at = [&](std::size_t i) -> const Tensor<float>& {
		return i < ckpt.state.parameters.size() ? ckpt.state.parameters[i]
												: ckpt.state.buffers[i - ckpt.state.parameters.size()];
	};
	for (std::size_t i = 0; i < count; ++i)
		tensors.push_back({{"name", ckpt.names[i]}, {"shape", tensor_at(i).shape()},
				{"kind", i < ckpt.state.parameters.size() ? "parameter" : "buffer"}});
	const Json manifest{{"config", to_json(ckpt.model)}, {"meta", ckpt.meta}, {"tensors", tensors}};
	const std::string text = manifest.dump();

	std::ofstream out(path, std::ios::binary | std::ios::trunc);
	if (!out) throw DataError("cannot write checkpoint " + path.string());
	const std::uint32_t version = Checkpoint::format_version;
	const std::uint64_t length = text.size();
	out.write(magic, 4);
	out.write(reinterpret_cast<const char*>(&version), sizeof version);
	out.write(reinterpret_cast<const char*>(&length), sizeof length);
	out.write(text.data(), static_cast<std::streamsize>(text.size()));
	for (std::size_t i = 0; i < count; ++i) {
		const auto& t = tensor_at(i);
		out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
	}
	if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw DataError("cannot open checkpoint " + path.string());
	char head[4];
	std::uint32_t version = 0;
	std::uint64_t length = 0;
	in.read(head, 4);
	in.read(reinterpret_cast<char*>(&version), sizeof version);
	in.read(reinterpret_cast<char*>(&length), sizeof length);
	if (!in || std::memcmp(head, magic, 4) != 0) throw DataError(path.string() + ": not a checkpoint file");
	if (version != Checkpoint::format_version)
		throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
	std::string text(length, '\0');
	in.read(text.data(), static_cast<std::streamsize>(length));
	if (!in) throw DataError(path.string() + ": truncated manifest");

	Checkpoint ckpt;
	try {
		const Json manifest = Json::parse(text);
		ckpt.model = model_config_from_json(manifest.at("config"));
		ckpt.meta = manifest.at("meta");
		for (const auto& entry : manifest.at("tensors")) {
			const auto shape = entry.at("shape").get<Shape>();
			Tensor<float> t(shape);
			in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
			if (!in) throw DataError(path.string() + ": truncated payload for " + entry.at("name").get<std::string>());
			ckpt.names.push_back(entry.at("name").get<std::string>());
			if (entry.at("kind") == "parameter")
				ckpt.state.parameters.push_back(std::move(t));
			else
				ckpt.state.buffers.push_back(std::move(t));
		}
	} catch (const Json::exception& e) {
		throw DataError(path.string() + ": bad manifest: " + e.what());
	} catch (const std::invalid_argument& e) {
		throw DataError(path.string() + ": bad manifest: " + e.what());
	}
	if (in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": trailing bytes after payload");
	return ckpt;
}

Model<float> restore_model(const Checkpoint& ckpt) {
	Model<float> model(ckpt.model);
	model.load_state(ckpt.state);
	return model;
}

} // namespace hkecg
