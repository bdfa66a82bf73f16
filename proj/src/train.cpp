#include "diffcap/train.hpp"

#include <chrono>
#include <limits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "diffcap/cli.hpp"
#include "json.hpp"

namespace diffcap {

namespace fs = std::filesystem;
using nlohmann::json;

double lr_schedule(long step, long total, double warmup_frac, double peak) {
    if (total < 1) throw std::invalid_argument("lr_schedule: total must be positive");
    if (step < 0 || step > total) throw std::invalid_argument("lr_schedule: step out of range");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0) {
        throw std::invalid_argument("lr_schedule: warmup fraction must be in [0,1)");
    }
    const double warmup = warmup_frac * static_cast<double>(total);
    if (static_cast<double>(step) < warmup) {
        return peak * static_cast<double>(step) / warmup;
    }
    const double denom = static_cast<double>(total) - warmup;
    const double progress = denom > 0 ? (static_cast<double>(step) - warmup) / denom : 1.0;
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void TrainConfig::validate() const {
    if (batch_size < 1 || grad_accum < 1) throw std::invalid_argument("TrainConfig: bad batch size");
    if (base_lr <= 0) throw std::invalid_argument("TrainConfig: base_lr must be positive");
    if (effective_encoder_lr() <= 0) {
        throw std::invalid_argument("TrainConfig: encoder lr must be positive");
    }
    if (warmup_frac < 0 || warmup_frac >= 1) {
        throw std::invalid_argument("TrainConfig: warmup_frac must be in [0,1)");
    }
    if (data_dir.empty()) throw std::invalid_argument("TrainConfig: data_dir missing");
    if (out_dir.empty()) throw std::invalid_argument("TrainConfig: out_dir missing");
}

std::string TrainConfig::to_json() const {
    json j;
    j["batch_size"] = batch_size;
    j["grad_accum"] = grad_accum;
    j["steps"] = steps;
    j["base_lr"] = base_lr;
    j["encoder_lr"] = encoder_lr;
    j["warmup_frac"] = warmup_frac;
    j["seed"] = seed;
    j["mdp_enabled"] = mdp_enabled;
    j["lora_enabled"] = lora_enabled;
    j["weight_decay"] = weight_decay;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["qa_template"] = qa_template;
    j["log_every"] = log_every;
    j["eval_max_new_tokens"] = eval_max_new_tokens;
    j["eval_strategy"] = eval_strategy;
    j["eval_beam_width"] = eval_beam_width;
    j["data_dir"] = data_dir;
    j["out_dir"] = out_dir;
    j["model"] = json::parse(model.to_json());
    j["lora"] = {{"rank", lora.rank}, {"alpha", lora.alpha}, {"targets", lora.targets}};
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    TrainConfig c;
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.steps = j.value("steps", c.steps);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.encoder_lr = j.value("encoder_lr", c.encoder_lr);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.seed = j.value("seed", c.seed);
    c.mdp_enabled = j.value("mdp_enabled", c.mdp_enabled);
    c.lora_enabled = j.value("lora_enabled", c.lora_enabled);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.qa_template = j.value("qa_template", c.qa_template);
    c.log_every = j.value("log_every", c.log_every);
    c.eval_max_new_tokens = j.value("eval_max_new_tokens", c.eval_max_new_tokens);
    c.eval_strategy = j.value("eval_strategy", c.eval_strategy);
    c.eval_beam_width = j.value("eval_beam_width", c.eval_beam_width);
    c.data_dir = j.value("data_dir", c.data_dir);
    c.out_dir = j.value("out_dir", c.out_dir);
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"].dump());
    if (j.contains("lora")) {
        c.lora.rank = j["lora"].value("rank", c.lora.rank);
        c.lora.alpha = j["lora"].value("alpha", c.lora.alpha);
        c.lora.targets = j["lora"].value("targets", c.lora.targets);
    }
    return c;
}

TrainConfig TrainConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("TrainConfig: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

AdamW::AdamW(std::vector<Param*> params, double beta1, double beta2, double eps,
             double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps),
      weight_decay_(weight_decay) {
    for (Param* p : params_) {
        p->adam_m = Matrix(p->value.rows, p->value.cols);
        p->adam_v = Matrix(p->value.rows, p->value.cols);
    }
}

void AdamW::step(const std::map<std::string, double>& group_lr, double default_lr) {
    ++t_;
    last_rates_.clear();
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Param* p : params_) {
        if (!p->trainable) continue;
        auto it = group_lr.find(p->group);
        const double lr = it != group_lr.end() ? it->second : default_lr;
        last_rates_[p->group] = lr;
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double g = p->grad.data[i];
            p->adam_m.data[i] = beta1_ * p->adam_m.data[i] + (1.0 - beta1_) * g;
            p->adam_v.data[i] = beta2_ * p->adam_v.data[i] + (1.0 - beta2_) * g * g;
            const double mhat = p->adam_m.data[i] / bc1;
            const double vhat = p->adam_v.data[i] / bc2;
            p->value.data[i] -=
                lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * p->value.data[i]);
        }
    }
}

namespace {

struct EncodedSample {
    const LoadedPair* pair;
    std::vector<int> question;
    std::vector<int> answer;  // caption tokens + <eos>
    std::string caption;
};

struct PreparedData {
    std::vector<LoadedPair> pairs;
    Vocab vocab;
    std::vector<EncodedSample> samples;
};

PreparedData prepare_training_data(const TrainConfig& cfg) {
    PreparedData data;
    data.pairs = load_corpus(cfg.data_dir, "train");
    if (data.pairs.empty()) throw std::runtime_error("train: no training pairs in " + cfg.data_dir);
    std::vector<std::string> captions;
    for (const LoadedPair& p : data.pairs) {
        for (const std::string& c : p.record.captions) captions.push_back(c);
    }
    data.vocab = Vocab::build(captions);
    for (const LoadedPair& p : data.pairs) {
        for (const QaSample& qa : to_qa(p.record, cfg.qa_template)) {
            EncodedSample s;
            s.pair = &p;
            s.question = data.vocab.encode(qa.question);
            s.answer = data.vocab.encode(qa.answer);
            s.answer.push_back(tokens::kEos);
            s.caption = qa.answer;
            data.samples.push_back(std::move(s));
        }
    }
    return data;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

std::string loss_trace_json(const std::vector<double>& trace) {
    json j = json::array();
    for (double v : trace) j.push_back(v);
    return j.dump();
}

}  // namespace

RunRecord train_run(const TrainConfig& cfg) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    fs::create_directories(cfg.out_dir);

    PreparedData data = prepare_training_data(cfg);

    ModelConfig mc = cfg.model;
    mc.decoder.vocab_size = data.vocab.size();
    mc.mdp_enabled = cfg.mdp_enabled;
    mc.init_seed = cfg.seed;
    Model model(mc);
    if (cfg.lora_enabled) model.attach_lora(cfg.lora, cfg.seed);

    const long n_samples = static_cast<long>(data.samples.size());
    const int micro_total = cfg.batch_size * cfg.grad_accum;
    const long total_steps =
        cfg.steps > 0 ? cfg.steps : (n_samples + micro_total - 1) / micro_total;

    AdamW opt(model.params().all(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

    RunRecord rec;
    rec.config_json = cfg.to_json();
    rec.seed = cfg.seed;
    for (const char* g : {"encoder", "mdp", "projector", "decoder", "lora"}) {
        rec.param_counts[g] = model.params().scalar_count(g);
    }

    // Deterministic sample order: reshuffled once per epoch from the seed.
    std::vector<size_t> order(data.samples.size());
    long cursor = 0;
    uint64_t epoch = 0;
    auto reshuffle = [&]() {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng r(mix_seed(cfg.seed, 0xE90C4 + epoch));
        for (size_t i = order.size() - 1; i > 0; --i) {
            std::swap(order[i], order[r.below(static_cast<int>(i + 1))]);
        }
        ++epoch;
        cursor = 0;
    };
    reshuffle();

    for (long step = 0; step < total_steps; ++step) {
        model.params().zero_grads();
        double batch_loss = 0.0;
        std::vector<std::pair<std::string, double>> batch_ids;
        auto abort_with_dump = [&](const std::string& why) {
            json dump;
            dump["step"] = step;
            dump["reason"] = why;
            dump["batch"] = json::array();
            for (const auto& [id, v] : batch_ids) dump["batch"].push_back({{"id", id}, {"loss", v}});
            write_text((fs::path(cfg.out_dir) / "diagnostic.json").string(), dump.dump(2));
            throw std::runtime_error("train: aborted at step " + std::to_string(step) + ": " + why +
                                     "; batch dumped to diagnostic.json");
        };
        for (int micro = 0; micro < micro_total; ++micro) {
            if (cursor >= n_samples) reshuffle();
            const EncodedSample& s = data.samples[order[cursor++]];
            Tape tape;
            Binder bind(tape);
            try {
                Var loss = model.sample_loss(tape, bind, s.pair->image_a, s.pair->image_b,
                                             s.question, s.answer);
                const double value = tape.val(loss)(0, 0);
                batch_ids.emplace_back(s.pair->record.id, value);
                batch_loss += value;
                tape.backward(loss);
                bind.harvest();
            } catch (const std::invalid_argument& e) {
                // Non-finite activations trip the feature contracts mid-forward.
                batch_ids.emplace_back(s.pair->record.id,
                                       std::numeric_limits<double>::quiet_NaN());
                abort_with_dump(e.what());
            }
        }
        batch_loss /= micro_total;
        if (!std::isfinite(batch_loss)) {
            abort_with_dump("non-finite loss");
        }
        for (Param* p : model.params().all()) {
            for (double& g : p->grad.data) g /= micro_total;
        }
        const double base = lr_schedule(step, total_steps, cfg.warmup_frac, cfg.base_lr);
        const double enc =
            lr_schedule(step, total_steps, cfg.warmup_frac, cfg.effective_encoder_lr());
        opt.step({{"encoder", enc}}, base);
        rec.loss_trace.push_back(batch_loss);
        rec.lr_trace.emplace_back(enc, base);
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == total_steps - 1)) {
            json ev{{"event", "step"}, {"step", step}, {"loss", batch_loss}, {"lr", base}};
            std::cout << ev.dump() << "\n";
        }
    }

    rec.final_loss = rec.loss_trace.empty() ? 0.0 : rec.loss_trace.back();
    rec.checkpoint_path = (fs::path(cfg.out_dir) / "model.ckpt").string();
    save_checkpoint(rec.checkpoint_path, model, data.vocab, cfg.seed);
    write_text((fs::path(cfg.out_dir) / "loss_trace.json").string(),
               loss_trace_json(rec.loss_trace));

    const auto t_end = std::chrono::steady_clock::now();
    rec.wall_time_s =
        deterministic_mode() ? 0.0 : std::chrono::duration<double>(t_end - t_start).count();

    json jr;
    jr["config"] = json::parse(rec.config_json);
    jr["seed"] = rec.seed;
    jr["steps"] = rec.loss_trace.size();
    jr["final_loss"] = rec.final_loss;
    jr["checkpoint"] = rec.checkpoint_path;
    jr["wall_time_s"] = rec.wall_time_s;
    for (const auto& [g, n] : rec.param_counts) jr["param_counts"][g] = n;
    jr["loss_trace_file"] = "loss_trace.json";
    write_text((fs::path(cfg.out_dir) / "run_record.json").string(), jr.dump(2));
    return rec;
}

EvalRun evaluate_run(const std::string& checkpoint_path, const std::string& data_dir,
                     const std::string& split, const GenOptions& gen, const std::string& out_dir) {
    fs::create_directories(out_dir);
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    std::vector<LoadedPair> pairs = load_corpus(data_dir, split);
    if (pairs.empty()) {
        throw std::runtime_error("evaluate: split '" + split + "' is empty in " + data_dir);
    }

    const std::vector<int> question = ckpt.vocab.encode(qa_template(0));
    json results = json::array();
    json references = json::array();
    std::vector<EvalInstance> corpus;
    for (const LoadedPair& p : pairs) {
        const std::vector<int> out =
            ckpt.model->generate(p.image_a, p.image_b, question, gen);
        const std::string caption = ckpt.vocab.decode(out);
        results.push_back({{"id", p.record.id}, {"caption", caption}});
        references.push_back({{"id", p.record.id}, {"captions", p.record.captions}});
        corpus.push_back(EvalInstance{p.record.id, caption, p.record.captions});
    }

    EvalRun run;
    run.pairs = static_cast<int>(pairs.size());
    run.results_path = (fs::path(out_dir) / "results.json").string();
    run.references_path = (fs::path(out_dir) / "references.json").string();
    run.report_path = (fs::path(out_dir) / "report.json").string();
    write_text(run.results_path, results.dump(2));
    write_text(run.references_path, references.dump(2));
    run.report = evaluate_corpus(corpus);
    write_text(run.report_path, run.report.to_json());
    json record;
    record["checkpoint"] = checkpoint_path;
    record["data_dir"] = data_dir;
    record["split"] = split;
    record["strategy"] = gen.strategy == GenOptions::Strategy::beam ? "beam" : "greedy";
    record["beam_width"] = gen.beam_width;
    record["max_new_tokens"] = gen.max_new_tokens;
    record["pairs"] = run.pairs;
    record["config"] = json::parse(ckpt.model->config().to_json());
    record["report_file"] = "report.json";
    write_text((fs::path(out_dir) / "eval_record.json").string(), record.dump(2));
    return run;
}

namespace {

std::map<std::string, double> report_metrics(const MetricReport& rep) {
    std::map<std::string, double> out;
    if (rep.bleu4) out["bleu4"] = *rep.bleu4;
    if (rep.rouge_l) out["rougeL"] = *rep.rouge_l;
    if (rep.cider_d) out["ciderD"] = *rep.cider_d;
    if (rep.meteor_s) out["meteorS"] = *rep.meteor_s;
    return out;
}

}  // namespace

AblationResult ablate(const TrainConfig& base, const std::vector<uint64_t>& seeds) {
    if (seeds.empty()) throw std::invalid_argument("ablate: need at least one seed");
    AblationResult result;
    std::map<std::string, double> sums_with, sums_without;
    for (uint64_t seed : seeds) {
        for (const bool with_mdp : {true, false}) {
            TrainConfig cfg = base;
            cfg.seed = seed;
            cfg.mdp_enabled = with_mdp;
            const std::string arm = with_mdp ? "with_mdp" : "without_mdp";
            cfg.out_dir =
                (fs::path(base.out_dir) / (arm + "_seed" + std::to_string(seed))).string();
            RunRecord rec = train_run(cfg);
            GenOptions gen;
            gen.strategy = cfg.eval_strategy == "beam" ? GenOptions::Strategy::beam
                                                       : GenOptions::Strategy::greedy;
            gen.beam_width = cfg.eval_beam_width;
            gen.max_new_tokens = cfg.eval_max_new_tokens;
            EvalRun ev = evaluate_run(rec.checkpoint_path, cfg.data_dir, "test", gen, cfg.out_dir);

            AblationArm a;
            a.name = arm;
            a.seed = seed;
            a.metrics = report_metrics(ev.report);
            a.final_loss = rec.final_loss;
            a.param_count = 0;
            for (const auto& [g, n] : rec.param_counts) {
                if (g != "lora" || cfg.lora_enabled) a.param_count += n;
            }
            if (with_mdp) result.mdp_param_count = rec.param_counts.at("mdp");
            result.arms.push_back(a);
            for (const auto& [m, v] : a.metrics) {
                (with_mdp ? sums_with : sums_without)[m] += v;
            }
        }
    }
    const double n = static_cast<double>(seeds.size());
    for (const auto& [m, v] : sums_with) result.mean_with[m] = v / n;
    for (const auto& [m, v] : sums_without) result.mean_without[m] = v / n;
    result.trend_expected =
        result.mean_with.count("ciderD") && result.mean_without.count("ciderD") &&
        result.mean_with["ciderD"] >= result.mean_without["ciderD"];
    return result;
}

std::string AblationResult::to_json() const {
    json j;
    for (const AblationArm& a : arms) {
        json ja;
        ja["arm"] = a.name;
        ja["seed"] = a.seed;
        ja["final_loss"] = a.final_loss;
        ja["param_count"] = a.param_count;
        for (const auto& [m, v] : a.metrics) ja["metrics"][m] = v * 100.0;
        j["runs"].push_back(ja);
    }
    for (const auto& [m, v] : mean_with) j["mean_with_mdp"][m] = v * 100.0;
    for (const auto& [m, v] : mean_without) j["mean_without_mdp"][m] = v * 100.0;
    for (const auto& [m, v] : mean_with) {
        if (mean_without.count(m)) j["mean_delta"][m] = (v - mean_without.at(m)) * 100.0;
    }
    j["mdp_param_count"] = mdp_param_count;
    j["trend_expected"] = trend_expected;
    j["trend_note"] =
        "directional comparison recorded, not asserted: small-scale variance can flip single runs";
    return j.dump(2);
}

std::string AblationResult::table() const {
    std::ostringstream os;
    os << "arm          seed  bleu4  rougeL  ciderD  meteorS  final_loss  params\n";
    auto fmt = [&](double v) {
        std::ostringstream t;
        t.setf(std::ios::fixed);
        t.precision(2);
        t << v * 100.0;
        return t.str();
    };
    for (const AblationArm& a : arms) {
        os << a.name << (a.name.size() < 12 ? std::string(12 - a.name.size(), ' ') : " ")
           << " " << a.seed << "   ";
        for (const char* m : {"bleu4", "rougeL", "ciderD", "meteorS"}) {
            auto it = a.metrics.find(m);
            os << (it == a.metrics.end() ? "n/a" : fmt(it->second)) << "   ";
        }
        os.setf(std::ios::fixed);
        os.precision(4);
        os << a.final_loss << "  " << a.param_count << "\n";
    }
    auto put_mean = [&](const char* label, const std::map<std::string, double>& mean) {
        os << label;
        for (const char* m : {"bleu4", "rougeL", "ciderD", "meteorS"}) {
            auto it = mean.find(m);
            os << " " << m << "=" << (it == mean.end() ? "n/a" : fmt(it->second));
        }
        os << "\n";
    };
    put_mean("mean with_mdp:   ", mean_with);
    put_mean("mean without_mdp:", mean_without);
    std::map<std::string, double> delta;
    for (const auto& [m, v] : mean_with) {
        if (mean_without.count(m)) delta[m] = v - mean_without.at(m);
    }
    put_mean("mean delta:      ", delta);
    os << "mdp parameter count: " << mdp_param_count << "\n";
    os << "expected trend (with-mdp ciderD >= without): " << (trend_expected ? "yes" : "no")
       << "\n";
    return os.str();
}

}  // namespace diffcap
