#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffcap/checkpoint.hpp"
#include "diffcap/datagen.hpp"
#include "diffcap/metrics.hpp"
#include "diffcap/model.hpp"

namespace diffcap {

// Linear warmup to the peak, cosine decay to zero at `total`.
double lr_schedule(long step, long total, double warmup_frac, double peak);

struct TrainConfig {
    int batch_size = 16;
    int grad_accum = 1;
    int steps = -1;  // -1: one epoch over the expanded QA samples
    double base_lr = 1e-3;
    double encoder_lr = -1.0;  // -1: base_lr / 5
    double warmup_frac = 0.05;
    uint64_t seed = 1;
    bool mdp_enabled = true;
    bool lora_enabled = false;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int qa_template = 0;
    int log_every = 50;  // 0 silences per-step JSON events
    int eval_max_new_tokens = 40;
    std::string eval_strategy = "greedy";
    int eval_beam_width = 3;
    std::string data_dir;
    std::string out_dir;
    ModelConfig model;
    LoraConfig lora;

    double effective_encoder_lr() const { return encoder_lr > 0 ? encoder_lr : base_lr / 5.0; }
    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
    static TrainConfig from_file(const std::string& path);
};

// Decoupled-weight-decay adaptive-moment optimizer with one learning rate
// per parameter group.
class AdamW {
public:
    AdamW(std::vector<Param*> params, double beta1, double beta2, double eps, double weight_decay);

    void step(const std::map<std::string, double>& group_lr, double default_lr);

    long steps_taken() const { return t_; }
    const std::map<std::string, double>& last_rates() const { return last_rates_; }

private:
    std::vector<Param*> params_;
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
    std::map<std::string, double> last_rates_;
};

struct RunRecord {
    std::string config_json;
    std::vector<double> loss_trace;
    std::vector<std::pair<double, double>> lr_trace;  // (encoder lr, base lr) per step
    std::string checkpoint_path;
    double wall_time_s = 0.0;
    uint64_t seed = 0;
    std::map<std::string, size_t> param_counts;
    double final_loss = 0.0;
};

RunRecord train_run(const TrainConfig& cfg);

struct EvalRun {
    MetricReport report;
    std::string results_path;
    std::string references_path;
    std::string report_path;
    int pairs = 0;
};

EvalRun evaluate_run(const std::string& checkpoint_path, const std::string& data_dir,
                     const std::string& split, const GenOptions& gen, const std::string& out_dir);

struct AblationArm {
    std::string name;  // with_mdp | without_mdp
    uint64_t seed;
    std::map<std::string, double> metrics;  // internal [0,1]
    double final_loss = 0.0;
    size_t param_count = 0;
};

struct AblationResult {
    std::vector<AblationArm> arms;
    std::map<std::string, double> mean_with;
    std::map<std::string, double> mean_without;
    size_t mdp_param_count = 0;
    bool trend_expected = false;  // mean with-mdp CIDEr-D >= without
    std::string to_json() const;
    std::string table() const;
};

AblationResult ablate(const TrainConfig& base, const std::vector<uint64_t>& seeds);

}  // namespace diffcap
