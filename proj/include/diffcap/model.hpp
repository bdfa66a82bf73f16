#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffcap/image.hpp"
#include "diffcap/lora.hpp"
#include "diffcap/mdp.hpp"
#include "diffcap/nn.hpp"
#include "diffcap/tokenizer.hpp"

namespace diffcap {

struct EncoderConfig {
    int image_size = 64;
    int patch_size = 8;
    int layers = 6;
    int channels = 64;
    int heads = 4;
    int ffn_hidden = 256;
    std::vector<int> tapped_layers = {3, 4, 5, 6};  // 1-based layer indices

    int tokens() const {
        const int side = image_size / patch_size;
        return side * side;
    }
    void validate() const;
};

struct DecoderConfig {
    int layers = 4;
    int channels = 128;
    int heads = 4;
    int ffn_hidden = 512;
    int max_seq = 256;
    int vocab_size = 0;

    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    MdpConfig mdp;
    DecoderConfig decoder;
    int projector_hidden = 128;
    bool mdp_enabled = true;
    uint64_t init_seed = 1;

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

enum class Role { image1, separator, image2, question, answer };

struct SequenceLayout {
    std::vector<int> ids;  // image positions hold <img1>/<img2> placeholders
    std::vector<Role> roles;
    std::vector<double> loss_mask;  // 1.0 exactly on answer positions
    int prefix_len = 0;

    int length() const { return static_cast<int>(ids.size()); }
};

std::string layout_string(const SequenceLayout& layout);

struct SequenceOverflow : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GenOptions {
    enum class Strategy { greedy, beam };
    Strategy strategy = Strategy::greedy;
    int beam_width = 1;
    int max_new_tokens = 40;
};

// Next-token logits for the answer built so far.
using StepFn = std::function<std::vector<double>(const std::vector<int>& answer_so_far)>;

// Decoding strategies over an arbitrary step function. Greedy breaks ties
// toward the lowest token id; beam keeps `beam_width` hypotheses by summed
// log-probability and picks the final answer by length-normalized score.
std::vector<int> generate_tokens(const StepFn& step, const GenOptions& opt, int eos_id);

class Model {
public:
    explicit Model(ModelConfig cfg);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const MdpP& mdp() const { return mdp_; }
    bool lora_enabled() const { return lora_enabled_; }
    const LoraConfig& lora_config() const { return lora_cfg_; }
    const std::deque<LoraAdapter>& lora_adapters() const { return lora_adapters_; }

    Matrix patch_tokens(const Image& img) const;

    // Feature maps after each tapped layer, all (T x channels).
    std::vector<Var> encode(Tape& t, Binder& bind, const Image& img) const;
    // Features after one specific layer (1-based); layer 0 = patch embedding.
    Var encode_layer(Tape& t, Binder& bind, const Image& img, int layer) const;

    Var project(Tape& t, Binder& bind, Var features) const;

    // Differential fusion when enabled, penultimate-layer features otherwise.
    std::pair<Var, Var> fuse_pair(Tape& t, Binder& bind, const Image& a, const Image& b) const;

    SequenceLayout assemble_sequence(const std::vector<int>& question,
                                     const std::vector<int>& answer) const;

    Var decoder_logits(Tape& t, Binder& bind, Var img1_proj, Var img2_proj,
                       const SequenceLayout& layout) const;

    // Mean next-token cross entropy over answer positions for one sample.
    Var sample_loss(Tape& t, Binder& bind, const Image& a, const Image& b,
                    const std::vector<int>& question, const std::vector<int>& answer) const;

    std::vector<int> generate(const Image& a, const Image& b, const std::vector<int>& question,
                              const GenOptions& opt) const;

    void attach_lora(const LoraConfig& lora_cfg, uint64_t seed);
    // Folds adapters into the decoder weights and unfreezes it.
    void merge_lora();

    size_t group_size(const std::string& group) const { return params_.scalar_count(group); }
    size_t total_params() const;

private:
    struct EncLayer {
        AttnP attn;
        FfnP ffn;
    };
    struct DecLayer {
        AttnP attn;
        FfnP ffn;
    };

    Var run_decoder(Tape& t, Binder& bind, Var embeddings) const;

    ModelConfig cfg_;
    mutable ParamStore params_;

    LinearP patch_embed_;
    Param* enc_pos_ = nullptr;
    std::vector<EncLayer> enc_layers_;

    MdpP mdp_;

    LinearP proj_fc1_, proj_fc2_;

    Param* tok_emb_ = nullptr;
    Param* dec_pos_ = nullptr;
    std::vector<DecLayer> dec_layers_;
    Param* dec_ln_g_ = nullptr;
    Param* dec_ln_b_ = nullptr;
    LinearP lm_head_;

    bool lora_enabled_ = false;
    LoraConfig lora_cfg_;
    std::deque<LoraAdapter> lora_adapters_;
    std::vector<std::pair<std::string, LinearP*>> decoder_linears_;
};

}  // namespace diffcap
