#include "diffcap/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "diffcap/checkpoint.hpp"
#include "diffcap/datagen.hpp"
#include "diffcap/metrics.hpp"
#include "diffcap/train.hpp"
#include "json.hpp"

namespace diffcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

void log_event(const json& j) { std::cout << j.dump() << "\n"; }

void write_run_manifest(const std::string& out_dir, const std::string& subcommand,
                        const std::vector<std::string>& argv, uint64_t seed) {
    if (out_dir.empty()) return;
    fs::create_directories(out_dir);
    json j;
    j["subcommand"] = subcommand;
    j["argv"] = argv;
    j["seed"] = seed;
    j["version"] = kVersion;
    j["deterministic"] = deterministic_mode();
    std::ofstream f(fs::path(out_dir) / "run_manifest.json");
    f << j.dump(2) << "\n";
}

std::vector<ChangeType> parse_types(const std::string& list) {
    std::vector<ChangeType> out;
    std::string cur;
    for (char c : list + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(change_type_from_name(cur));
            cur.clear();
        } else if (!std::isspace(static_cast<unsigned char>(c))) {
            cur.push_back(c);
        }
    }
    if (out.empty()) throw std::invalid_argument("empty change type list");
    return out;
}

GenOptions make_gen_options(const std::string& strategy, int beam, int max_new) {
    GenOptions gen;
    if (strategy == "greedy") {
        gen.strategy = GenOptions::Strategy::greedy;
    } else if (strategy == "beam") {
        gen.strategy = GenOptions::Strategy::beam;
    } else {
        throw std::invalid_argument("unknown decoding strategy '" + strategy + "'");
    }
    gen.beam_width = beam;
    gen.max_new_tokens = max_new;
    return gen;
}

}  // namespace

bool deterministic_mode() {
    const char* v = std::getenv("DIFFCAP_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"image-difference captioning toolkit"};
    app.require_subcommand(1);
    std::vector<std::string> argv_echo(argv, argv + argc);

    uint64_t seed = 1;
    app.add_option("--seed", seed, "global random seed; every run derives all randomness from it");

    // generate-data
    auto* gen_cmd = app.add_subcommand("generate-data", "render a synthetic change-pair corpus");
    int gd_pairs = 100;
    std::string gd_out;
    std::string gd_types;
    bool gd_distractors = false;
    int gd_image_size = 64;
    gen_cmd->add_option("--pairs", gd_pairs, "number of image pairs")->required();
    gen_cmd->add_option("--out", gd_out, "output directory")->required();
    gen_cmd->add_option("--types", gd_types, "comma-separated change types (default: all 12)");
    gen_cmd->add_option("--distractors", gd_distractors,
                        "apply unlabeled brightness/viewpoint jitter to the second image");
    gen_cmd->add_option("--image-size", gd_image_size, "square image size in pixels");
    int gd_captions = 0;
    gen_cmd->add_option("--captions", gd_captions,
                        "captions per pair (0: sample one or two per pair)");

    // validate-data
    auto* val_cmd = app.add_subcommand("validate-data", "check a corpus directory");
    std::string vd_dir;
    std::string vd_out;
    val_cmd->add_option("dir", vd_dir, "corpus directory")->required();
    val_cmd->add_option("--out", vd_out, "optional directory for the validation report");

    // train
    auto* train_cmd = app.add_subcommand("train", "one-stage fine-tuning run");
    std::string tr_config;
    std::string tr_data_override, tr_out_override;
    train_cmd->add_option("--config", tr_config, "JSON training config")->required();
    train_cmd->add_option("--data", tr_data_override, "override config data_dir");
    train_cmd->add_option("--out", tr_out_override, "override config out_dir");

    // evaluate
    auto* eval_cmd = app.add_subcommand(
        "evaluate", "score a checkpoint on a split, or score results/references files");
    std::string ev_ckpt, ev_split = "test", ev_data, ev_out = "eval_out";
    std::string ev_results, ev_references, ev_metrics = "bleu4,rougeL,ciderD,meteorS";
    std::string ev_report_out = "report.json";
    std::string ev_strategy = "greedy";
    int ev_beam = 3, ev_max_new = 40;
    eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint path (model evaluation mode)");
    eval_cmd->add_option("--split", ev_split, "dataset split: train|val|test");
    eval_cmd->add_option("--data", ev_data, "corpus directory (model evaluation mode)");
    eval_cmd->add_option("--out", ev_out, "output directory (model mode) or report path");
    eval_cmd->add_option("--results", ev_results, "results JSON file (file scoring mode)");
    eval_cmd->add_option("--references", ev_references, "references JSON file");
    eval_cmd->add_option("--metrics", ev_metrics, "comma-separated metric names");
    eval_cmd->add_option("--strategy", ev_strategy, "greedy|beam");
    eval_cmd->add_option("--beam", ev_beam, "beam width");
    eval_cmd->add_option("--max-new", ev_max_new, "maximum generated tokens");

    // ablate
    auto* abl_cmd = app.add_subcommand("ablate", "train and score with/without the fusion module");
    std::string ab_config, ab_seeds = "1,2,3";
    abl_cmd->add_option("--config", ab_config, "JSON training config")->required();
    abl_cmd->add_option("--seeds", ab_seeds, "comma-separated seeds");

    // caption
    auto* cap_cmd = app.add_subcommand("caption", "describe the differences between two images");
    std::string cp_ckpt, cp_a, cp_b, cp_out;
    std::string cp_strategy = "greedy";
    int cp_beam = 3, cp_max_new = 40, cp_template = 0;
    cap_cmd->add_option("--ckpt", cp_ckpt, "checkpoint path")->required();
    cap_cmd->add_option("--image-a", cp_a, "first image (PNG)")->required();
    cap_cmd->add_option("--image-b", cp_b, "second image (PNG)")->required();
    cap_cmd->add_option("--template", cp_template, "question template id");
    cap_cmd->add_option("--strategy", cp_strategy, "greedy|beam");
    cap_cmd->add_option("--beam", cp_beam, "beam width");
    cap_cmd->add_option("--max-new", cp_max_new, "maximum generated tokens");
    cap_cmd->add_option("--out", cp_out, "optional output directory");

    // merge-lora
    auto* mrg_cmd = app.add_subcommand("merge-lora", "fold adapters into the decoder weights");
    std::string mg_ckpt, mg_out;
    mrg_cmd->add_option("--ckpt", mg_ckpt, "checkpoint with adapters")->required();
    mrg_cmd->add_option("--out", mg_out, "merged checkpoint path")->required();

    for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n" << app.help();
        return 1;
    }

    try {
        if (gen_cmd->parsed()) {
            BuildOptions opt;
            opt.n_pairs = gd_pairs;
            opt.seed = seed;
            opt.out_dir = gd_out;
            opt.gen.image_size = gd_image_size;
            opt.gen.distractors = gd_distractors;
            opt.gen.fixed_captions = gd_captions;
            if (!gd_types.empty()) opt.gen.menu = parse_types(gd_types);
            const CorpusStats st = build_corpus(opt);
            write_run_manifest(gd_out, "generate-data", argv_echo, seed);
            log_event({{"event", "corpus_built"},
                       {"pairs", st.pairs},
                       {"captions", st.captions},
                       {"avg_words", st.avg_words_per_caption},
                       {"sentences_per_caption", st.sentences_per_caption},
                       {"vocabulary", st.vocabulary},
                       {"train", st.splits.train},
                       {"val", st.splits.val},
                       {"test", st.splits.test},
                       {"out", gd_out}});
            return 0;
        }
        if (val_cmd->parsed()) {
            const ValidationReport rep = validate_corpus(vd_dir);
            for (const std::string& e : rep.errors) log_event({{"event", "error"}, {"detail", e}});
            for (const std::string& w : rep.warnings) {
                log_event({{"event", "warning"}, {"detail", w}});
            }
            log_event({{"event", "validation"},
                       {"ok", rep.ok()},
                       {"errors", rep.errors.size()},
                       {"warnings", rep.warnings.size()},
                       {"pairs", rep.stats.pairs}});
            if (!vd_out.empty()) {
                write_run_manifest(vd_out, "validate-data", argv_echo, seed);
                json j;
                j["errors"] = rep.errors;
                j["warnings"] = rep.warnings;
                j["pairs"] = rep.stats.pairs;
                std::ofstream f(fs::path(vd_out) / "validation.json");
                f << j.dump(2) << "\n";
            }
            return rep.ok() ? 0 : 2;
        }
        if (train_cmd->parsed()) {
            TrainConfig cfg = TrainConfig::from_file(tr_config);
            if (!tr_data_override.empty()) cfg.data_dir = tr_data_override;
            if (!tr_out_override.empty()) cfg.out_dir = tr_out_override;
            if (app.count("--seed") > 0) cfg.seed = seed;
            write_run_manifest(cfg.out_dir, "train", argv_echo, cfg.seed);
            const RunRecord rec = train_run(cfg);
            log_event({{"event", "train_done"},
                       {"steps", rec.loss_trace.size()},
                       {"final_loss", rec.final_loss},
                       {"checkpoint", rec.checkpoint_path},
                       {"wall_time_s", deterministic_mode() ? 0.0 : rec.wall_time_s}});
            return 0;
        }
        if (eval_cmd->parsed()) {
            std::set<std::string> metrics;
            std::string cur;
            for (char c : ev_metrics + ",") {
                if (c == ',') {
                    if (!cur.empty()) metrics.insert(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            const bool file_mode = !ev_results.empty() || !ev_references.empty();
            if (file_mode) {
                if (ev_results.empty() || ev_references.empty()) {
                    std::cerr << "evaluate: file mode needs both --results and --references\n";
                    return 1;
                }
                const MetricReport rep = evaluate_files(ev_results, ev_references, metrics);
                const std::string out_path = ev_out == "eval_out" ? ev_report_out : ev_out;
                std::ofstream f(out_path);
                if (!f) throw std::runtime_error("cannot write " + out_path);
                f << rep.to_json() << "\n";
                log_event({{"event", "report_written"}, {"path", out_path}});
                return 0;
            }
            if (ev_ckpt.empty() || ev_data.empty()) {
                std::cerr << "evaluate: model mode needs --ckpt and --data\n";
                return 1;
            }
            const GenOptions gen = make_gen_options(ev_strategy, ev_beam, ev_max_new);
            write_run_manifest(ev_out, "evaluate", argv_echo, seed);
            const EvalRun run = evaluate_run(ev_ckpt, ev_data, ev_split, gen, ev_out);
            json metrics_json;
            if (run.report.bleu4) metrics_json["bleu4"] = *run.report.bleu4 * 100.0;
            if (run.report.rouge_l) metrics_json["rougeL"] = *run.report.rouge_l * 100.0;
            if (run.report.cider_d) metrics_json["ciderD"] = *run.report.cider_d * 100.0;
            if (run.report.meteor_s) metrics_json["meteorS"] = *run.report.meteor_s * 100.0;
            log_event({{"event", "evaluation_done"},
                       {"pairs", run.pairs},
                       {"metrics", metrics_json},
                       {"report", run.report_path}});
            return 0;
        }
        if (abl_cmd->parsed()) {
            TrainConfig cfg = TrainConfig::from_file(ab_config);
            if (app.count("--seed") > 0) cfg.seed = seed;
            std::vector<uint64_t> seeds;
            std::string cur;
            for (char c : ab_seeds + ",") {
                if (c == ',') {
                    if (!cur.empty()) seeds.push_back(std::stoull(cur));
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            write_run_manifest(cfg.out_dir, "ablate", argv_echo, cfg.seed);
            const AblationResult res = ablate(cfg, seeds);
            std::ofstream f(fs::path(cfg.out_dir) / "ablation.json");
            f << res.to_json() << "\n";
            std::cout << res.table();
            log_event({{"event", "ablation_done"},
                       {"arms", res.arms.size()},
                       {"trend_expected", res.trend_expected}});
            return 0;
        }
        if (cap_cmd->parsed()) {
            LoadedCheckpoint ckpt = load_checkpoint(cp_ckpt);
            const Image a = read_png(cp_a);
            const Image b = read_png(cp_b);
            const GenOptions gen = make_gen_options(cp_strategy, cp_beam, cp_max_new);
            const std::vector<int> question = ckpt.vocab.encode(qa_template(cp_template));
            const std::vector<int> out = ckpt.model->generate(a, b, question, gen);
            const std::string caption = ckpt.vocab.decode(out);
            log_event({{"event", "caption"}, {"caption", caption}});
            if (!cp_out.empty()) {
                write_run_manifest(cp_out, "caption", argv_echo, seed);
                std::ofstream f(fs::path(cp_out) / "caption.json");
                f << json{{"caption", caption}}.dump(2) << "\n";
            }
            return 0;
        }
        if (mrg_cmd->parsed()) {
            LoadedCheckpoint ckpt = load_checkpoint(mg_ckpt);
            if (!ckpt.model->lora_enabled()) {
                throw std::runtime_error("merge-lora: checkpoint has no adapters");
            }
            ckpt.model->merge_lora();
            save_checkpoint(mg_out, *ckpt.model, ckpt.vocab, ckpt.seed);
            write_run_manifest(fs::path(mg_out).parent_path().string(), "merge-lora", argv_echo,
                               seed);
            log_event({{"event", "merged"}, {"out", mg_out}});
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << json{{"event", "fatal"}, {"error", e.what()}}.dump() << "\n";
        return 2;
    }
    std::cerr << app.help();
    return 1;
}

}  // namespace diffcap
