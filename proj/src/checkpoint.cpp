#include "diffcap/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace diffcap {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'D', 'C', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char buf[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                            static_cast<unsigned char>(v >> 16),
                            static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(buf), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    return static_cast<uint32_t>(buf[0]) | (static_cast<uint32_t>(buf[1]) << 8) |
           (static_cast<uint32_t>(buf[2]) << 16) | (static_cast<uint32_t>(buf[3]) << 24);
}

void write_u64(std::ostream& os, uint64_t v) {
    write_u32(os, static_cast<uint32_t>(v));
    write_u32(os, static_cast<uint32_t>(v >> 32));
}

uint64_t read_u64(std::istream& is) {
    const uint64_t lo = read_u32(is);
    const uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const Vocab& vocab,
                     uint64_t seed) {
    Model& m = const_cast<Model&>(model);
    json header;
    header["config"] = json::parse(model.config().to_json());
    header["seed"] = seed;
    header["vocab"] = vocab.words();
    header["lora_enabled"] = model.lora_enabled();
    if (model.lora_enabled()) {
        header["lora"] = {{"rank", model.lora_config().rank},
                          {"alpha", model.lora_config().alpha},
                          {"targets", model.lora_config().targets}};
    }

    std::vector<Param*> saved;
    uint64_t offset = 0;
    json groups = json::object();
    for (Param* p : m.params().all()) {
        if (p->group == "lora" && !model.lora_enabled()) continue;
        groups[p->group].push_back(json{{"name", p->name},
                                        {"rows", p->value.rows},
                                        {"cols", p->value.cols},
                                        {"offset", offset}});
        offset += p->value.size();
        saved.push_back(p);
    }
    header["groups"] = groups;
    const std::string header_text = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kMagic, 4);
    write_u32(f, kVersion);
    write_u64(f, header_text.size());
    f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    write_u64(f, offset);  // payload length in doubles
    for (Param* p : saved) {
        f.write(reinterpret_cast<const char*>(p->value.data.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    const uint32_t version = read_u32(f);
    if (version != kVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    }
    const uint64_t header_len = read_u64(f);
    std::string header_text(header_len, '\0');
    f.read(header_text.data(), static_cast<std::streamsize>(header_len));
    const json header = json::parse(header_text);
    const uint64_t payload_len = read_u64(f);
    std::vector<double> payload(payload_len);
    f.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(payload_len * sizeof(double)));
    if (!f) throw std::runtime_error("load_checkpoint: truncated payload in " + path);

    LoadedCheckpoint out;
    out.seed = header.at("seed").get<uint64_t>();
    out.vocab = Vocab::from_words(header.at("vocab").get<std::vector<std::string>>());
    ModelConfig cfg = ModelConfig::from_json(header.at("config").dump());
    out.model = std::make_unique<Model>(cfg);
    if (header.value("lora_enabled", false)) {
        LoraConfig lc;
        lc.rank = header.at("lora").at("rank").get<int>();
        lc.alpha = header.at("lora").at("alpha").get<double>();
        lc.targets = header.at("lora").at("targets").get<std::vector<std::string>>();
        out.model->attach_lora(lc, out.seed);
    }

    for (const auto& [group, entries] : header.at("groups").items()) {
        (void)group;
        for (const json& e : entries) {
            const std::string name = e.at("name").get<std::string>();
            Param* p = out.model->params().find(name);
            if (p == nullptr) {
                throw std::runtime_error("load_checkpoint: unknown parameter " + name);
            }
            const int rows = e.at("rows").get<int>();
            const int cols = e.at("cols").get<int>();
            if (p->value.rows != rows || p->value.cols != cols) {
                throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
            }
            const uint64_t off = e.at("offset").get<uint64_t>();
            if (off + p->value.size() > payload.size()) {
                throw std::runtime_error("load_checkpoint: segment out of bounds for " + name);
            }
            std::copy(payload.begin() + static_cast<long>(off),
                      payload.begin() + static_cast<long>(off + p->value.size()),
                      p->value.data.begin());
        }
    }
    return out;
}

}  // namespace diffcap
