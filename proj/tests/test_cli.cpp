#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffcap/cli.hpp"
#include "diffcap/datagen.hpp"

namespace fs = std::filesystem;

namespace {

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv = {"diffcap"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return diffcap::cli_main(static_cast<int>(argv.size()), argv.data());
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("diffcap_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("help exits 0 for the app and every subcommand") {
    CHECK(run_cli({"--help"}) == 0);
    for (const char* sub : {"generate-data", "validate-data", "train", "evaluate", "ablate",
                            "caption", "merge-lora"}) {
        CHECK(run_cli({sub, "--help"}) == 0);
    }
}

TEST_CASE("usage errors exit 1") {
    CHECK(run_cli({"no-such-subcommand"}) == 1);
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"generate-data", "--frobnicate", "3"}) == 1);
    CHECK(run_cli({"generate-data"}) == 1);  // missing required flags
    CHECK(run_cli({"evaluate", "--results", "only-one-side.json"}) == 1);
}

TEST_CASE("runtime failures exit 2") {
    CHECK(run_cli({"validate-data", "/nonexistent/dir"}) == 2);
    CHECK(run_cli({"caption", "--ckpt", "/nonexistent.ckpt", "--image-a", "a.png", "--image-b",
                   "b.png"}) == 2);
    CHECK(run_cli({"generate-data", "--pairs", "20", "--out", "/tmp/x_distr",
                   "--types", "viewpoint,illumination"}) == 2);
}

TEST_CASE("full pipeline: generate, validate, train, evaluate, caption, merge") {
    const fs::path root = temp_dir("pipeline");
    const std::string data = (root / "data").string();
    CHECK(run_cli({"generate-data", "--pairs", "14", "--seed", "3", "--out", data, "--image-size",
                   "32", "--captions", "1"}) == 0);
    CHECK(fs::exists(fs::path(data) / "manifest.jsonl"));
    CHECK(fs::exists(fs::path(data) / "run_manifest.json"));
    CHECK(run_cli({"validate-data", data}) == 0);

    const std::string cfg_path = (root / "cfg.json").string();
    {
        std::ofstream f(cfg_path);
        f << R"({
  "batch_size": 4, "steps": 4, "base_lr": 0.001, "warmup_frac": 0.1, "seed": 5,
  "lora_enabled": true, "lora": {"rank": 2, "alpha": 4.0},
  "data_dir": ")" << data << R"(", "out_dir": ")" << (root / "run").string() << R"(",
  "model": {
    "encoder": {"image_size": 32, "patch_size": 8, "layers": 2, "channels": 16, "heads": 2,
                 "ffn_hidden": 32, "tapped_layers": [1, 2]},
    "mdp": {"channels": 16, "attention_heads": 2, "mlp_hidden": 24, "tapped_layers": [1, 2]},
    "decoder": {"layers": 2, "channels": 24, "heads": 2, "ffn_hidden": 48, "max_seq": 144},
    "projector_hidden": 24
  },
  "eval_max_new_tokens": 12
})";
    }
    CHECK(run_cli({"train", "--config", cfg_path}) == 0);
    const std::string ckpt = (root / "run" / "model.ckpt").string();
    CHECK(fs::exists(ckpt));
    CHECK(fs::exists(root / "run" / "run_manifest.json"));
    CHECK(fs::exists(root / "run" / "loss_trace.json"));

    CHECK(run_cli({"evaluate", "--ckpt", ckpt, "--data", data, "--split", "val", "--out",
                   (root / "eval").string(), "--max-new", "10"}) == 0);
    CHECK(fs::exists(root / "eval" / "report.json"));
    const std::string report = slurp(root / "eval" / "report.json");
    CHECK(report.find("metrics") != std::string::npos);

    // Reruns reproduce the loss trace byte for byte.
    const std::string cfg2_path = (root / "cfg2.json").string();
    {
        std::string text = slurp(cfg_path);
        const std::string from = (root / "run").string();
        text.replace(text.find(from), from.size(), (root / "run2").string());
        std::ofstream f(cfg2_path);
        f << text;
    }
    CHECK(run_cli({"train", "--config", cfg2_path}) == 0);
    CHECK(slurp(root / "run" / "loss_trace.json") == slurp(root / "run2" / "loss_trace.json"));

    // Caption one pair with the trained checkpoint.
    const auto pairs = diffcap::load_corpus(data, "train");
    CHECK(run_cli({"caption", "--ckpt", ckpt, "--image-a",
                   (fs::path(data) / pairs[0].record.image_a).string(), "--image-b",
                   (fs::path(data) / pairs[0].record.image_b).string(), "--max-new", "8"}) == 0);

    // Merge the adapters and keep captioning.
    const std::string merged = (root / "merged.ckpt").string();
    CHECK(run_cli({"merge-lora", "--ckpt", ckpt, "--out", merged}) == 0);
    CHECK(run_cli({"caption", "--ckpt", merged, "--image-a",
                   (fs::path(data) / pairs[0].record.image_a).string(), "--image-b",
                   (fs::path(data) / pairs[0].record.image_b).string(), "--max-new", "8"}) == 0);
    CHECK(run_cli({"merge-lora", "--ckpt", merged, "--out", merged + "2"}) == 2);

    // File-scoring mode of evaluate.
    const std::string results = (root / "results.json").string();
    const std::string refs = (root / "refs.json").string();
    {
        std::ofstream r(results);
        r << R"([{"id":"p1","caption":"a red square appeared."}])";
        std::ofstream g(refs);
        g << R"([{"id":"p1","captions":["a red square appeared."]}])";
    }
    const std::string report2 = (root / "file_report.json").string();
    CHECK(run_cli({"evaluate", "--results", results, "--references", refs, "--out", report2}) ==
          0);
    CHECK(slurp(report2).find("bleu4") != std::string::npos);

    fs::remove_all(root);
}
