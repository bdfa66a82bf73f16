#include "diffcap/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace diffcap {

using nlohmann::json;

void EncoderConfig::validate() const {
    if (image_size < patch_size || image_size % patch_size != 0) {
        throw std::invalid_argument("EncoderConfig: image size must be a multiple of patch size");
    }
    if (layers < 1) throw std::invalid_argument("EncoderConfig: need at least one layer");
    if (channels % heads != 0) {
        throw std::invalid_argument("EncoderConfig: channels not divisible by heads");
    }
    if (tapped_layers.empty()) throw std::invalid_argument("EncoderConfig: no tapped layers");
    for (size_t i = 0; i < tapped_layers.size(); ++i) {
        if (tapped_layers[i] < 1 || tapped_layers[i] > layers) {
            throw std::invalid_argument("EncoderConfig: tapped layer out of range");
        }
        if (i > 0 && tapped_layers[i] <= tapped_layers[i - 1]) {
            throw std::invalid_argument("EncoderConfig: tapped layers must be strictly increasing");
        }
    }
}

void DecoderConfig::validate() const {
    if (layers < 1 || channels < 1 || ffn_hidden < 1 || max_seq < 4) {
        throw std::invalid_argument("DecoderConfig: non-positive dimension");
    }
    if (channels % heads != 0) {
        throw std::invalid_argument("DecoderConfig: channels not divisible by heads");
    }
    if (vocab_size < tokens::kSpecialCount) {
        throw std::invalid_argument("DecoderConfig: vocabulary too small");
    }
}

void ModelConfig::validate() const {
    encoder.validate();
    decoder.validate();
    if (mdp_enabled) {
        mdp.validate();
        if (mdp.channels != encoder.channels) {
            throw std::invalid_argument("ModelConfig: mdp channels must match encoder channels");
        }
        if (mdp.tapped_layers != encoder.tapped_layers) {
            throw std::invalid_argument("ModelConfig: mdp and encoder tapped layers must agree");
        }
        if (encoder.tapped_layers.size() < 2) {
            throw std::invalid_argument("ModelConfig: differential fusion needs >= 2 taps");
        }
    }
    if (projector_hidden < 1) throw std::invalid_argument("ModelConfig: projector_hidden < 1");
}

std::string ModelConfig::to_json() const {
    json j;
    j["encoder"] = {{"image_size", encoder.image_size},   {"patch_size", encoder.patch_size},
                    {"layers", encoder.layers},           {"channels", encoder.channels},
                    {"heads", encoder.heads},             {"ffn_hidden", encoder.ffn_hidden},
                    {"tapped_layers", encoder.tapped_layers}};
    j["mdp"] = {{"channels", mdp.channels},
                {"attention_heads", mdp.attention_heads},
                {"mlp_hidden", mdp.mlp_hidden},
                {"tapped_layers", mdp.tapped_layers},
                {"per_layer_params", mdp.per_layer_params}};
    j["decoder"] = {{"layers", decoder.layers},         {"channels", decoder.channels},
                    {"heads", decoder.heads},           {"ffn_hidden", decoder.ffn_hidden},
                    {"max_seq", decoder.max_seq},       {"vocab_size", decoder.vocab_size}};
    j["projector_hidden"] = projector_hidden;
    j["mdp_enabled"] = mdp_enabled;
    j["init_seed"] = init_seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    ModelConfig cfg;
    if (j.contains("encoder")) {
        const json& e = j["encoder"];
        cfg.encoder.image_size = e.value("image_size", cfg.encoder.image_size);
        cfg.encoder.patch_size = e.value("patch_size", cfg.encoder.patch_size);
        cfg.encoder.layers = e.value("layers", cfg.encoder.layers);
        cfg.encoder.channels = e.value("channels", cfg.encoder.channels);
        cfg.encoder.heads = e.value("heads", cfg.encoder.heads);
        cfg.encoder.ffn_hidden = e.value("ffn_hidden", cfg.encoder.ffn_hidden);
        cfg.encoder.tapped_layers =
            e.value("tapped_layers", cfg.encoder.tapped_layers);
    }
    if (j.contains("mdp")) {
        const json& m = j["mdp"];
        cfg.mdp.channels = m.value("channels", cfg.mdp.channels);
        cfg.mdp.attention_heads = m.value("attention_heads", cfg.mdp.attention_heads);
        cfg.mdp.mlp_hidden = m.value("mlp_hidden", cfg.mdp.mlp_hidden);
        cfg.mdp.tapped_layers = m.value("tapped_layers", cfg.mdp.tapped_layers);
        cfg.mdp.per_layer_params = m.value("per_layer_params", cfg.mdp.per_layer_params);
    }
    if (j.contains("decoder")) {
        const json& d = j["decoder"];
        cfg.decoder.layers = d.value("layers", cfg.decoder.layers);
        cfg.decoder.channels = d.value("channels", cfg.decoder.channels);
        cfg.decoder.heads = d.value("heads", cfg.decoder.heads);
        cfg.decoder.ffn_hidden = d.value("ffn_hidden", cfg.decoder.ffn_hidden);
        cfg.decoder.max_seq = d.value("max_seq", cfg.decoder.max_seq);
        cfg.decoder.vocab_size = d.value("vocab_size", cfg.decoder.vocab_size);
    }
    cfg.projector_hidden = j.value("projector_hidden", cfg.projector_hidden);
    cfg.mdp_enabled = j.value("mdp_enabled", cfg.mdp_enabled);
    cfg.init_seed = j.value("init_seed", cfg.init_seed);
    return cfg;
}

std::string layout_string(const SequenceLayout& layout) {
    std::string out;
    size_t i = 0;
    const char* names[] = {"img1", "sep", "img2", "question", "answer"};
    while (i < layout.roles.size()) {
        size_t j = i;
        while (j < layout.roles.size() && layout.roles[j] == layout.roles[i]) ++j;
        out += "[" + std::string(names[static_cast<int>(layout.roles[i])]) + " x" +
               std::to_string(j - i) + "]";
        i = j;
    }
    return out;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.mdp_enabled) {
        // The module consumes the encoder taps; keep its view consistent.
        cfg_.mdp.channels = cfg_.encoder.channels;
        cfg_.mdp.tapped_layers = cfg_.encoder.tapped_layers;
    }
    cfg_.validate();

    const int d_enc = cfg_.encoder.channels;
    const int d_dec = cfg_.decoder.channels;
    const int T = cfg_.encoder.tokens();
    const int patch_dim = cfg_.encoder.patch_size * cfg_.encoder.patch_size * 3;

    // Independent init streams keep non-differential weights identical across
    // runs that only toggle mdp_enabled.
    Rng enc_rng(mix_seed(cfg_.init_seed, 1));
    patch_embed_ = make_linear(params_, enc_rng, "encoder.patch", "encoder", d_enc, patch_dim);
    enc_pos_ = params_.create("encoder", "encoder.pos", T, d_enc);
    for (double& v : enc_pos_->value.data) v = 0.02 * enc_rng.normal();
    for (int l = 0; l < cfg_.encoder.layers; ++l) {
        const std::string prefix = "encoder.l" + std::to_string(l);
        EncLayer layer;
        layer.attn = make_attn(params_, enc_rng, prefix + ".attn", "encoder", d_enc,
                               cfg_.encoder.heads, false);
        layer.ffn = make_ffn(params_, enc_rng, prefix + ".ffn", "encoder", d_enc,
                             cfg_.encoder.ffn_hidden);
        enc_layers_.push_back(layer);
    }

    if (cfg_.mdp_enabled) {
        Rng mdp_rng(mix_seed(cfg_.init_seed, 2));
        mdp_ = make_mdp(params_, mdp_rng, cfg_.mdp);
    }

    Rng proj_rng(mix_seed(cfg_.init_seed, 3));
    proj_fc1_ = make_linear(params_, proj_rng, "projector.fc1", "projector", cfg_.projector_hidden,
                            d_enc);
    proj_fc2_ = make_linear(params_, proj_rng, "projector.fc2", "projector", d_dec,
                            cfg_.projector_hidden);

    Rng dec_rng(mix_seed(cfg_.init_seed, 4));
    tok_emb_ = params_.create("decoder", "decoder.tok_emb", cfg_.decoder.vocab_size, d_dec);
    for (double& v : tok_emb_->value.data) v = 0.02 * dec_rng.normal();
    dec_pos_ = params_.create("decoder", "decoder.pos", cfg_.decoder.max_seq, d_dec);
    for (double& v : dec_pos_->value.data) v = 0.02 * dec_rng.normal();
    for (int l = 0; l < cfg_.decoder.layers; ++l) {
        const std::string prefix = "decoder.l" + std::to_string(l);
        DecLayer layer;
        layer.attn = make_attn(params_, dec_rng, prefix + ".attn", "decoder", d_dec,
                               cfg_.decoder.heads, false);
        layer.ffn = make_ffn(params_, dec_rng, prefix + ".ffn", "decoder", d_dec,
                             cfg_.decoder.ffn_hidden);
        dec_layers_.push_back(layer);
    }
    dec_ln_g_ = params_.create("decoder", "decoder.final_ln.g", 1, d_dec);
    dec_ln_g_->value.fill(1.0);
    dec_ln_b_ = params_.create("decoder", "decoder.final_ln.b", 1, d_dec);
    lm_head_ = make_linear(params_, dec_rng, "decoder.lm_head", "decoder",
                           cfg_.decoder.vocab_size, d_dec);

    for (size_t l = 0; l < dec_layers_.size(); ++l) {
        const std::string prefix = "decoder.l" + std::to_string(l) + ".";
        decoder_linears_.emplace_back(prefix + "attn.q", &dec_layers_[l].attn.q);
        decoder_linears_.emplace_back(prefix + "attn.k", &dec_layers_[l].attn.k);
        decoder_linears_.emplace_back(prefix + "attn.v", &dec_layers_[l].attn.v);
        decoder_linears_.emplace_back(prefix + "attn.o", &dec_layers_[l].attn.o);
        decoder_linears_.emplace_back(prefix + "ffn.fc1", &dec_layers_[l].ffn.fc1);
        decoder_linears_.emplace_back(prefix + "ffn.fc2", &dec_layers_[l].ffn.fc2);
    }
}

Matrix Model::patch_tokens(const Image& img) const {
    const int size = cfg_.encoder.image_size;
    if (img.width != size || img.height != size) {
        throw std::invalid_argument("patch_tokens: image is " + std::to_string(img.width) + "x" +
                                    std::to_string(img.height) + ", expected " +
                                    std::to_string(size));
    }
    const int patch = cfg_.encoder.patch_size;
    const int side = size / patch;
    Matrix out(side * side, patch * patch * 3);
    for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
            double* row = out.row(py * side + px);
            int k = 0;
            for (int y = 0; y < patch; ++y) {
                for (int x = 0; x < patch; ++x) {
                    for (int c = 0; c < 3; ++c) {
                        row[k++] = img.at(px * patch + x, py * patch + y, c);
                    }
                }
            }
        }
    }
    return out;
}

Var Model::encode_layer(Tape& t, Binder& bind, const Image& img, int layer) const {
    if (layer < 0 || layer > cfg_.encoder.layers) {
        throw std::invalid_argument("encode_layer: layer out of range");
    }
    Var x = add(t, linear(t, bind, patch_embed_, t.leaf(patch_tokens(img))), bind(enc_pos_));
    for (int l = 0; l < layer; ++l) {
        x = self_attn_block(t, bind, enc_layers_[l].attn, x);
        x = ffn_block(t, bind, enc_layers_[l].ffn, x);
    }
    return x;
}

std::vector<Var> Model::encode(Tape& t, Binder& bind, const Image& img) const {
    Var x = add(t, linear(t, bind, patch_embed_, t.leaf(patch_tokens(img))), bind(enc_pos_));
    std::vector<Var> taps;
    size_t next_tap = 0;
    for (int l = 1; l <= cfg_.encoder.layers; ++l) {
        x = self_attn_block(t, bind, enc_layers_[l - 1].attn, x);
        x = ffn_block(t, bind, enc_layers_[l - 1].ffn, x);
        if (next_tap < cfg_.encoder.tapped_layers.size() &&
            cfg_.encoder.tapped_layers[next_tap] == l) {
            taps.push_back(x);
            ++next_tap;
        }
    }
    return taps;
}

Var Model::project(Tape& t, Binder& bind, Var features) const {
    if (t.val(features).cols != cfg_.encoder.channels) {
        throw std::invalid_argument("project: expected encoder width " +
                                    std::to_string(cfg_.encoder.channels) + ", got " +
                                    shape_str(t.val(features)));
    }
    return linear(t, bind, proj_fc2_, gelu(t, linear(t, bind, proj_fc1_, features)));
}

std::pair<Var, Var> Model::fuse_pair(Tape& t, Binder& bind, const Image& a, const Image& b) const {
    if (cfg_.mdp_enabled) {
        std::vector<Var> pyr_a = encode(t, bind, a);
        std::vector<Var> pyr_b = encode(t, bind, b);
        MdpResult res = mdp_forward(t, bind, mdp_, pyr_a, pyr_b);
        return {res.fused1, res.fused2};
    }
    const int penultimate = std::max(1, cfg_.encoder.layers - 1);
    return {encode_layer(t, bind, a, penultimate), encode_layer(t, bind, b, penultimate)};
}

SequenceLayout Model::assemble_sequence(const std::vector<int>& question,
                                        const std::vector<int>& answer) const {
    const int T = cfg_.encoder.tokens();
    SequenceLayout layout;
    const int total = 2 * T + 1 + static_cast<int>(question.size() + answer.size());
    if (total > cfg_.decoder.max_seq) {
        throw SequenceOverflow("sequence of " + std::to_string(total) + " tokens exceeds max_seq " +
                               std::to_string(cfg_.decoder.max_seq));
    }
    layout.ids.reserve(total);
    layout.roles.reserve(total);
    for (int i = 0; i < T; ++i) {
        layout.ids.push_back(tokens::kImg1);
        layout.roles.push_back(Role::image1);
    }
    layout.ids.push_back(tokens::kSep);
    layout.roles.push_back(Role::separator);
    for (int i = 0; i < T; ++i) {
        layout.ids.push_back(tokens::kImg2);
        layout.roles.push_back(Role::image2);
    }
    for (int id : question) {
        layout.ids.push_back(id);
        layout.roles.push_back(Role::question);
    }
    layout.prefix_len = static_cast<int>(layout.ids.size());
    for (int id : answer) {
        layout.ids.push_back(id);
        layout.roles.push_back(Role::answer);
    }
    layout.loss_mask.assign(layout.ids.size(), 0.0);
    for (size_t i = layout.prefix_len; i < layout.ids.size(); ++i) layout.loss_mask[i] = 1.0;
    return layout;
}

Var Model::run_decoder(Tape& t, Binder& bind, Var embeddings) const {
    const int S = t.val(embeddings).rows;
    Var x = add(t, embeddings, slice_rows(t, bind(dec_pos_), 0, S));
    const Matrix mask = causal_mask(S);
    for (const DecLayer& layer : dec_layers_) {
        x = self_attn_block(t, bind, layer.attn, x, &mask);
        x = ffn_block(t, bind, layer.ffn, x);
    }
    x = layer_norm(t, x, bind(dec_ln_g_), bind(dec_ln_b_));
    return linear(t, bind, lm_head_, x);
}

Var Model::decoder_logits(Tape& t, Binder& bind, Var img1_proj, Var img2_proj,
                          const SequenceLayout& layout) const {
    const int T = cfg_.encoder.tokens();
    if (t.val(img1_proj).rows != T || t.val(img2_proj).rows != T ||
        t.val(img1_proj).cols != cfg_.decoder.channels ||
        t.val(img2_proj).cols != cfg_.decoder.channels) {
        throw std::invalid_argument("decoder_logits: projected maps must be T x decoder width");
    }
    std::vector<int> text_ids(layout.ids.begin() + 2 * T + 1, layout.ids.end());
    Var tok = bind(tok_emb_);
    Var sep = gather_rows(t, tok, {tokens::kSep});
    Var emb = text_ids.empty()
                  ? concat_rows(t, {img1_proj, sep, img2_proj})
                  : concat_rows(t, {img1_proj, sep, img2_proj, gather_rows(t, tok, text_ids)});
    return run_decoder(t, bind, emb);
}

Var Model::sample_loss(Tape& t, Binder& bind, const Image& a, const Image& b,
                       const std::vector<int>& question, const std::vector<int>& answer) const {
    if (answer.empty()) throw std::invalid_argument("sample_loss: empty answer");
    SequenceLayout layout = assemble_sequence(question, answer);
    auto [f1, f2] = fuse_pair(t, bind, a, b);
    Var logits = decoder_logits(t, bind, project(t, bind, f1), project(t, bind, f2), layout);
    const int S = layout.length();
    Var shifted = slice_rows(t, logits, 0, S - 1);
    std::vector<int> targets(layout.ids.begin() + 1, layout.ids.end());
    std::vector<double> mask(layout.loss_mask.begin() + 1, layout.loss_mask.end());
    return cross_entropy_masked(t, shifted, targets, mask);
}

std::vector<int> generate_tokens(const StepFn& step, const GenOptions& opt, int eos_id) {
    if (opt.max_new_tokens < 1) throw std::invalid_argument("generate: max_new_tokens < 1");
    if (opt.strategy == GenOptions::Strategy::greedy) {
        std::vector<int> out;
        for (int i = 0; i < opt.max_new_tokens; ++i) {
            const std::vector<double> logits = step(out);
            int best = 0;
            for (size_t v = 1; v < logits.size(); ++v) {
                if (logits[v] > logits[best]) best = static_cast<int>(v);
            }
            out.push_back(best);
            if (best == eos_id) break;
        }
        return out;
    }

    if (opt.beam_width < 1) throw std::invalid_argument("generate: beam width < 1");
    struct Hyp {
        std::vector<int> toks;
        double logp = 0.0;
        bool done = false;
    };
    std::vector<Hyp> beam = {Hyp{}};
    for (int stepno = 0; stepno < opt.max_new_tokens; ++stepno) {
        bool any_live = false;
        for (const Hyp& h : beam) any_live |= !h.done;
        if (!any_live) break;
        struct Cand {
            double logp;
            int parent;
            int token;  // -1 marks a finished hypothesis carried over
        };
        std::vector<Cand> cands;
        for (size_t hi = 0; hi < beam.size(); ++hi) {
            const Hyp& h = beam[hi];
            if (h.done) {
                cands.push_back({h.logp, static_cast<int>(hi), -1});
                continue;
            }
            std::vector<double> logits = step(h.toks);
            const double lse = log_sum_exp_row(logits.data(), static_cast<int>(logits.size()));
            for (size_t v = 0; v < logits.size(); ++v) {
                cands.push_back({h.logp + logits[v] - lse, static_cast<int>(hi), static_cast<int>(v)});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });
        std::vector<Hyp> next;
        for (const Cand& c : cands) {
            if (static_cast<int>(next.size()) >= opt.beam_width) break;
            if (c.token < 0) {
                next.push_back(beam[c.parent]);
                continue;
            }
            Hyp h = beam[c.parent];
            h.toks.push_back(c.token);
            h.logp = c.logp;
            h.done = c.token == eos_id;
            next.push_back(std::move(h));
        }
        beam = std::move(next);
    }
    // Length-normalized selection among the survivors.
    int best = 0;
    double best_score = -1e300;
    for (size_t i = 0; i < beam.size(); ++i) {
        if (beam[i].toks.empty()) continue;
        const double score = beam[i].logp / static_cast<double>(beam[i].toks.size());
        if (score > best_score + 1e-15) {
            best_score = score;
            best = static_cast<int>(i);
        }
    }
    return beam[best].toks;
}

std::vector<int> Model::generate(const Image& a, const Image& b, const std::vector<int>& question,
                                 const GenOptions& opt) const {
    // The image half of the sequence is fixed; cache the projected maps as
    // plain matrices and rebuild only the decoder pass per step.
    Matrix proj1, proj2;
    {
        Tape t;
        Binder bind(t);
        auto [f1, f2] = fuse_pair(t, bind, a, b);
        proj1 = t.val(project(t, bind, f1));
        proj2 = t.val(project(t, bind, f2));
    }
    const int prefix = 2 * cfg_.encoder.tokens() + 1 + static_cast<int>(question.size());
    const int room = cfg_.decoder.max_seq - prefix;
    if (room < 1) throw SequenceOverflow("generate: no room for answer tokens");
    GenOptions capped = opt;
    capped.max_new_tokens = std::min(opt.max_new_tokens, room);

    StepFn step = [&](const std::vector<int>& answer_so_far) {
        Tape t;
        Binder bind(t);
        SequenceLayout layout = assemble_sequence(question, answer_so_far);
        Var logits = decoder_logits(t, bind, t.leaf(proj1), t.leaf(proj2), layout);
        const Matrix& L = t.val(logits);
        return std::vector<double>(L.row(L.rows - 1), L.row(L.rows - 1) + L.cols);
    };
    return generate_tokens(step, capped, tokens::kEos);
}

void Model::attach_lora(const LoraConfig& lora_cfg, uint64_t seed) {
    if (lora_enabled_) throw std::logic_error("attach_lora: adapters already attached");
    lora_cfg_ = lora_cfg;
    Rng rng(mix_seed(seed, 5));
    for (auto& [name, lp] : decoder_linears_) {
        bool wanted = false;
        for (const std::string& target : lora_cfg.targets) {
            if (name.size() >= target.size() &&
                name.compare(name.size() - target.size(), target.size(), target) == 0) {
                wanted = true;
            }
        }
        if (!wanted) continue;
        lora_adapters_.push_back(make_lora(params_, rng, name, lp->w->value.rows,
                                           lp->w->value.cols, lora_cfg.rank, lora_cfg.alpha));
        lp->adapter = &lora_adapters_.back();
    }
    if (lora_adapters_.empty()) {
        throw std::invalid_argument("attach_lora: no decoder maps matched the target list");
    }
    for (Param* p : params_.in_group("decoder")) p->trainable = false;
    lora_enabled_ = true;
}

void Model::merge_lora() {
    if (!lora_enabled_) throw std::logic_error("merge_lora: no adapters attached");
    for (const LoraAdapter& ad : lora_adapters_) {
        Param* base = params_.find(ad.target + ".w");
        if (base == nullptr) throw std::logic_error("merge_lora: missing base weight " + ad.target);
        lora_merge(ad, base->value);
    }
    for (auto& [name, lp] : decoder_linears_) lp->adapter = nullptr;
    lora_adapters_.clear();
    for (Param* p : params_.in_group("decoder")) p->trainable = true;
    for (Param* p : params_.in_group("lora")) p->trainable = false;
    lora_enabled_ = false;
}

size_t Model::total_params() const {
    size_t n = 0;
    for (const char* g : {"encoder", "mdp", "projector", "decoder"}) {
        n += params_.scalar_count(g);
    }
    if (lora_enabled_) n += params_.scalar_count("lora");
    return n;
}

}  // namespace diffcap
