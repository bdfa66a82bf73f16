#include "diffcap/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "diffcap/lora.hpp"

namespace diffcap {

Param* ParamStore::create(const std::string& group, const std::string& name, int rows, int cols) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate param name: " + name);
    params_.push_back(Param{name, group, Matrix(rows, cols), Matrix(rows, cols), {}, {}, true});
    Param* p = &params_.back();
    by_name_[name] = p;
    return p;
}

Param* ParamStore::find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

const Param* ParamStore::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
}

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    for (Param& p : params_) out.push_back(&p);
    return out;
}

std::vector<Param*> ParamStore::in_group(const std::string& group) {
    std::vector<Param*> out;
    for (Param& p : params_) {
        if (p.group == group) out.push_back(&p);
    }
    return out;
}

size_t ParamStore::scalar_count(const std::string& group) const {
    size_t n = 0;
    for (const Param& p : params_) {
        if (p.group == group) n += p.value.size();
    }
    return n;
}

size_t ParamStore::scalar_count() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
}

void ParamStore::zero_grads() {
    for (Param& p : params_) p.grad.fill(0.0);
}

Var Binder::operator()(Param* p) {
    auto it = index_.find(p);
    if (it != index_.end()) return bound_[it->second].second;
    Var v = tape_->leaf(p->value);
    index_[p] = static_cast<int>(bound_.size());
    bound_.emplace_back(p, v);
    return v;
}

void Binder::harvest() {
    for (auto& [p, v] : bound_) {
        const Matrix& g = tape_->grad(v);
        if (g.empty()) continue;
        for (size_t i = 0; i < g.data.size(); ++i) p->grad.data[i] += g.data[i];
    }
}

void init_uniform_scaled(Matrix& m, Rng& rng, int fan_in, int fan_out) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (double& v : m.data) v = rng.uniform(-bound, bound);
}

LinearP make_linear(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
                    int out_dim, int in_dim, bool bias, bool zero_init) {
    LinearP p;
    p.w = ps.create(group, prefix + ".w", out_dim, in_dim);
    if (!zero_init) init_uniform_scaled(p.w->value, rng, in_dim, out_dim);
    if (bias) p.b = ps.create(group, prefix + ".b", 1, out_dim);
    return p;
}

AttnP make_attn(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
                int dim, int heads, bool with_kv_norm) {
    if (dim % heads != 0) {
        throw std::invalid_argument(prefix + ": channels " + std::to_string(dim) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    AttnP p;
    p.q = make_linear(ps, rng, prefix + ".q", group, dim, dim);
    p.k = make_linear(ps, rng, prefix + ".k", group, dim, dim);
    p.v = make_linear(ps, rng, prefix + ".v", group, dim, dim);
    p.o = make_linear(ps, rng, prefix + ".o", group, dim, dim);
    p.ln_q_gamma = ps.create(group, prefix + ".ln_q.g", 1, dim);
    p.ln_q_gamma->value.fill(1.0);
    p.ln_q_beta = ps.create(group, prefix + ".ln_q.b", 1, dim);
    if (with_kv_norm) {
        p.ln_kv_gamma = ps.create(group, prefix + ".ln_kv.g", 1, dim);
        p.ln_kv_gamma->value.fill(1.0);
        p.ln_kv_beta = ps.create(group, prefix + ".ln_kv.b", 1, dim);
    }
    p.heads = heads;
    return p;
}

FfnP make_ffn(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
              int dim, int hidden) {
    FfnP p;
    p.fc1 = make_linear(ps, rng, prefix + ".fc1", group, hidden, dim);
    p.fc2 = make_linear(ps, rng, prefix + ".fc2", group, dim, hidden);
    p.ln_gamma = ps.create(group, prefix + ".ln.g", 1, dim);
    p.ln_gamma->value.fill(1.0);
    p.ln_beta = ps.create(group, prefix + ".ln.b", 1, dim);
    return p;
}

Var linear(Tape& t, Binder& bind, const LinearP& p, Var x) {
    if (p.adapter != nullptr) {
        return lora_apply(t, bind, p, *p.adapter, x);
    }
    Var y = matmul_nt(t, x, bind(p.w));
    if (p.b != nullptr) y = add_rowvec(t, y, bind(p.b));
    return y;
}

Var mha(Tape& t, Binder& bind, const AttnP& p, Var q_in, Var kv_in, const Matrix* add_mask) {
    const int dim = p.q.w->value.rows;
    const int dh = dim / p.heads;
    Var q = linear(t, bind, p.q, q_in);
    Var k = linear(t, bind, p.k, kv_in);
    Var v = linear(t, bind, p.v, kv_in);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> ctx;
    ctx.reserve(p.heads);
    for (int h = 0; h < p.heads; ++h) {
        Var qh = slice_cols(t, q, h * dh, (h + 1) * dh);
        Var kh = slice_cols(t, k, h * dh, (h + 1) * dh);
        Var vh = slice_cols(t, v, h * dh, (h + 1) * dh);
        Var scores = scale(t, matmul_nt(t, qh, kh), inv_sqrt);
        Var attn = add_mask != nullptr ? softmax_rows_masked(t, scores, *add_mask)
                                       : softmax_rows(t, scores);
        ctx.push_back(matmul(t, attn, vh));
    }
    Var merged = p.heads == 1 ? ctx[0] : concat_cols(t, ctx);
    return linear(t, bind, p.o, merged);
}

Var self_attn_block(Tape& t, Binder& bind, const AttnP& p, Var x, const Matrix* add_mask) {
    Var normed = layer_norm(t, x, bind(p.ln_q_gamma), bind(p.ln_q_beta));
    return add(t, x, mha(t, bind, p, normed, normed, add_mask));
}

Var cross_attn_block(Tape& t, Binder& bind, const AttnP& p, Var q_in, Var kv_in) {
    if (p.ln_kv_gamma == nullptr) {
        throw std::invalid_argument("cross_attn_block: attention was built without kv norm");
    }
    Var qn = layer_norm(t, q_in, bind(p.ln_q_gamma), bind(p.ln_q_beta));
    Var kvn = layer_norm(t, kv_in, bind(p.ln_kv_gamma), bind(p.ln_kv_beta));
    return add(t, q_in, mha(t, bind, p, qn, kvn, nullptr));
}

Var ffn_block(Tape& t, Binder& bind, const FfnP& p, Var x) {
    Var normed = layer_norm(t, x, bind(p.ln_gamma), bind(p.ln_beta));
    Var h = gelu(t, linear(t, bind, p.fc1, normed));
    return add(t, x, linear(t, bind, p.fc2, h));
}

Matrix causal_mask(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) m(i, j) = -1e30;
    }
    return m;
}

}  // namespace diffcap
