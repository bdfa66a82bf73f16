#pragma once

#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffcap/matrix.hpp"
#include "diffcap/rng.hpp"
#include "diffcap/tape.hpp"

namespace diffcap {

struct LoraAdapter;

// Named trainable matrix plus its accumulated gradient and optimizer moments.
struct Param {
    std::string name;
    std::string group;
    Matrix value;
    Matrix grad;
    Matrix adam_m;
    Matrix adam_v;
    bool trainable = true;
};

class ParamStore {
public:
    Param* create(const std::string& group, const std::string& name, int rows, int cols);
    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;

    std::vector<Param*> all();
    std::vector<Param*> in_group(const std::string& group);
    size_t scalar_count(const std::string& group) const;
    size_t scalar_count() const;

    void zero_grads();

private:
    std::deque<Param> params_;  // deque keeps Param* stable across create()
    std::unordered_map<std::string, Param*> by_name_;
};

// Binds parameters onto a tape, once each, and pulls their gradients back
// after backward(). One Binder per forward/backward pass.
class Binder {
public:
    explicit Binder(Tape& tape) : tape_(&tape) {}

    Var operator()(Param* p);
    void harvest();

private:
    Tape* tape_;
    std::vector<std::pair<Param*, Var>> bound_;
    std::unordered_map<Param*, int> index_;
};

// ---- initialization -----------------------------------------------------

void init_uniform_scaled(Matrix& m, Rng& rng, int fan_in, int fan_out);

// ---- composable blocks --------------------------------------------------

struct LinearP {
    Param* w = nullptr;  // out x in
    Param* b = nullptr;  // 1 x out, optional
    const LoraAdapter* adapter = nullptr;
};

struct AttnP {
    LinearP q, k, v, o;
    Param* ln_q_gamma = nullptr;
    Param* ln_q_beta = nullptr;
    Param* ln_kv_gamma = nullptr;  // cross-attention normalizes its kv stream separately
    Param* ln_kv_beta = nullptr;
    int heads = 1;
};

struct FfnP {
    LinearP fc1, fc2;
    Param* ln_gamma = nullptr;
    Param* ln_beta = nullptr;
};

LinearP make_linear(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
                    int out_dim, int in_dim, bool bias = true, bool zero_init = false);
AttnP make_attn(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
                int dim, int heads, bool with_kv_norm);
FfnP make_ffn(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
              int dim, int hidden);

Var linear(Tape& t, Binder& bind, const LinearP& p, Var x);

// Multi-head scaled dot-product attention, no normalization or residual.
Var mha(Tape& t, Binder& bind, const AttnP& p, Var q_in, Var kv_in, const Matrix* add_mask);

// Pre-norm residual blocks.
Var self_attn_block(Tape& t, Binder& bind, const AttnP& p, Var x, const Matrix* add_mask = nullptr);
Var cross_attn_block(Tape& t, Binder& bind, const AttnP& p, Var q_in, Var kv_in);
Var ffn_block(Tape& t, Binder& bind, const FfnP& p, Var x);

Matrix causal_mask(int n);

}  // namespace diffcap
