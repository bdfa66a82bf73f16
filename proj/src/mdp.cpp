#include "diffcap/mdp.hpp"

#include <stdexcept>
#include <string>

namespace diffcap {

void MdpConfig::validate() const {
    if (channels < 1 || attention_heads < 1 || mlp_hidden < 1) {
        throw std::invalid_argument("MdpConfig: non-positive dimension");
    }
    if (channels % attention_heads != 0) {
        throw std::invalid_argument("MdpConfig: channels not divisible by attention_heads");
    }
    if (tapped_layers.size() < 2) {
        throw std::invalid_argument("MdpConfig: need at least 2 tapped layers");
    }
    for (size_t i = 1; i < tapped_layers.size(); ++i) {
        if (tapped_layers[i] <= tapped_layers[i - 1]) {
            throw std::invalid_argument("MdpConfig: tapped_layers must be strictly increasing");
        }
    }
}

namespace {

MdpBlockP make_block(ParamStore& ps, Rng& rng, const std::string& prefix, const std::string& group,
                     const MdpConfig& cfg) {
    const int d = cfg.channels;
    MdpBlockP blk;
    blk.w_m = ps.create(group, prefix + ".w_m", d, 2 * d);
    init_uniform_scaled(blk.w_m->value, rng, 2 * d, d);
    blk.w_p = ps.create(group, prefix + ".w_p", d, 3 * d);
    init_uniform_scaled(blk.w_p->value, rng, 3 * d, d);
    blk.sa = make_attn(ps, rng, prefix + ".sa", group, d, cfg.attention_heads, false);
    blk.fuse_ca = make_attn(ps, rng, prefix + ".fuse_ca", group, d, cfg.attention_heads, true);
    blk.fuse_mlp = make_ffn(ps, rng, prefix + ".fuse_mlp", group, d, cfg.mlp_hidden);
    blk.refine_ca = make_attn(ps, rng, prefix + ".refine_ca", group, d, cfg.attention_heads, true);
    blk.score_fc1 = make_linear(ps, rng, prefix + ".score_fc1", group, cfg.mlp_hidden, 3 * d);
    blk.score_fc2 = make_linear(ps, rng, prefix + ".score_fc2", group, d, cfg.mlp_hidden,
                                /*bias=*/true, /*zero_init=*/true);
    return blk;
}

void check_pair(const Matrix& a, const Matrix& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": feature shapes differ, " + shape_str(a) +
                                    " vs " + shape_str(b));
    }
    if (a.rows < 1 || a.cols < 1) {
        throw std::invalid_argument(std::string(what) + ": empty feature map");
    }
}

}  // namespace

MdpP make_mdp(ParamStore& ps, Rng& rng, const MdpConfig& cfg, const std::string& group) {
    cfg.validate();
    MdpP p;
    p.cfg = cfg;
    const size_t n_blocks = cfg.per_layer_params ? cfg.tapped_layers.size() : 1;
    for (size_t i = 0; i < n_blocks; ++i) {
        const std::string prefix =
            cfg.per_layer_params ? group + ".layer" + std::to_string(i) : group + ".shared";
        p.blocks.push_back(make_block(ps, rng, prefix, group, cfg));
    }
    return p;
}

GatedDiff gated_difference(Tape& t, Binder& bind, const MdpBlockP& blk, Var f1, Var f2) {
    const Matrix& F1 = t.val(f1);
    const Matrix& F2 = t.val(f2);
    check_pair(F1, F2, "gated_difference");
    const int d = blk.w_m->value.rows;
    if (F1.cols != d || blk.w_m->value.cols != 2 * d || blk.w_p->value.cols != 3 * d) {
        throw std::invalid_argument("gated_difference: gate shapes do not match d=" +
                                    std::to_string(F1.cols));
    }
    if (!F1.all_finite() || !F2.all_finite()) {
        throw std::invalid_argument("gated_difference: non-finite input feature");
    }
    Var wm = bind(blk.w_m);
    Var wp = bind(blk.w_p);
    GatedDiff out;
    out.lambda1 = sigmoid(t, matmul_nt(t, concat_cols(t, {f1, f2}), wm));
    out.lambda2 = sigmoid(t, matmul_nt(t, concat_cols(t, {f2, f1}), wm));
    out.fhat1 = mul(t, f1, out.lambda1);
    out.fhat2 = mul(t, f2, out.lambda2);
    out.diff_slice = sub(t, out.fhat1, out.fhat2);
    out.delta = matmul_nt(t, concat_cols(t, {out.fhat1, out.fhat2, out.diff_slice}), wp);
    return out;
}

Var self_attend_diff(Tape& t, Binder& bind, const MdpBlockP& blk, Var delta) {
    return self_attn_block(t, bind, blk.sa, delta);
}

Var cross_fuse_diff(Tape& t, Binder& bind, const MdpBlockP& blk, Var delta_sa, Var f1, Var f2) {
    check_pair(t.val(f1), t.val(f2), "cross_fuse_diff");
    check_pair(t.val(delta_sa), t.val(f1), "cross_fuse_diff");
    Var kv = concat_rows(t, {f1, f2, delta_sa});  // 3T keys/values
    Var fused = cross_attn_block(t, bind, blk.fuse_ca, delta_sa, kv);
    return ffn_block(t, bind, blk.fuse_mlp, fused);
}

std::pair<Var, Var> refine_features(Tape& t, Binder& bind, const MdpBlockP& blk, Var f1, Var f2,
                                    Var delta_ca) {
    check_pair(t.val(f1), t.val(f2), "refine_features");
    check_pair(t.val(delta_ca), t.val(f1), "refine_features");
    Var r1 = cross_attn_block(t, bind, blk.refine_ca, f1, concat_rows(t, {f1, delta_ca}));
    Var r2 = cross_attn_block(t, bind, blk.refine_ca, f2, concat_rows(t, {f2, delta_ca}));
    return {r1, r2};
}

Var layer_score(Tape& t, Binder& bind, const MdpBlockP& blk, Var refined1, Var refined2, Var delta) {
    check_pair(t.val(refined1), t.val(refined2), "layer_score");
    check_pair(t.val(delta), t.val(refined1), "layer_score");
    Var pooled = mean_rows(t, concat_cols(t, {refined1, refined2, delta}));  // 1 x 3d
    Var h = gelu(t, linear(t, bind, blk.score_fc1, pooled));
    return sigmoid(t, linear(t, bind, blk.score_fc2, h));  // 1 x d
}

std::pair<Var, Var> integrate_multiscale(Tape& t, const std::vector<ScoredLayer>& layers) {
    if (layers.size() < 2) {
        throw std::invalid_argument("integrate_multiscale: need at least 2 layers");
    }
    const Matrix& first = t.val(layers[0].refined1);
    for (const ScoredLayer& l : layers) {
        if (!t.val(l.refined1).same_shape(first) || !t.val(l.refined2).same_shape(first)) {
            throw std::invalid_argument("integrate_multiscale: inconsistent layer shapes");
        }
        const Matrix& s = t.val(l.score);
        if (s.rows != 1 || s.cols != first.cols) {
            throw std::invalid_argument("integrate_multiscale: score must be 1 x d");
        }
    }
    Var acc1 = mul_rowvec(t, layers[0].refined1, layers[0].score);
    Var acc2 = mul_rowvec(t, layers[0].refined2, layers[0].score);
    for (size_t i = 1; i < layers.size(); ++i) {
        acc1 = add(t, acc1, mul_rowvec(t, layers[i].refined1, layers[i].score));
        acc2 = add(t, acc2, mul_rowvec(t, layers[i].refined2, layers[i].score));
    }
    return {acc1, acc2};
}

MdpResult mdp_forward(Tape& t, Binder& bind, const MdpP& p, const std::vector<Var>& pyramid1,
                      const std::vector<Var>& pyramid2) {
    if (pyramid1.size() != pyramid2.size()) {
        throw std::invalid_argument("mdp_forward: pyramids differ in layer count");
    }
    if (pyramid1.size() != p.cfg.tapped_layers.size()) {
        throw std::invalid_argument("mdp_forward: pyramid depth does not match tapped_layers");
    }
    MdpResult result;
    std::vector<ScoredLayer> scored;
    for (size_t i = 0; i < pyramid1.size(); ++i) {
        const MdpBlockP& blk = p.block_for_layer(i);
        MdpLayerTrace trace;
        trace.gate = gated_difference(t, bind, blk, pyramid1[i], pyramid2[i]);
        trace.delta_sa = self_attend_diff(t, bind, blk, trace.gate.delta);
        trace.delta_ca = cross_fuse_diff(t, bind, blk, trace.delta_sa, pyramid1[i], pyramid2[i]);
        auto [r1, r2] = refine_features(t, bind, blk, pyramid1[i], pyramid2[i], trace.delta_ca);
        trace.refined1 = r1;
        trace.refined2 = r2;
        trace.score = layer_score(t, bind, blk, r1, r2, trace.gate.delta);
        scored.push_back({r1, r2, trace.score});
        result.traces.push_back(trace);
    }
    auto [fused1, fused2] = integrate_multiscale(t, scored);
    result.fused1 = fused1;
    result.fused2 = fused2;
    return result;
}

}  // namespace diffcap
