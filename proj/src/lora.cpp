#include "diffcap/lora.hpp"

#include <stdexcept>

#include "diffcap/kernels.hpp"

namespace diffcap {

LoraAdapter make_lora(ParamStore& ps, Rng& rng, const std::string& target_name, int out_dim,
                      int in_dim, int rank, double alpha) {
    if (rank < 1) throw std::invalid_argument("lora rank must be >= 1");
    LoraAdapter ad;
    ad.target = target_name;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.down = ps.create("lora", "lora." + target_name + ".down", rank, in_dim);
    init_uniform_scaled(ad.down->value, rng, in_dim, rank);
    // up stays zero so the adapted map equals the base map at step 0.
    ad.up = ps.create("lora", "lora." + target_name + ".up", out_dim, rank);
    return ad;
}

Var lora_apply(Tape& t, Binder& bind, const LinearP& base, const LoraAdapter& ad, Var x) {
    const Matrix& X = t.val(x);
    if (X.cols != base.w->value.cols || ad.down->value.cols != X.cols ||
        ad.up->value.rows != base.w->value.rows || ad.up->value.cols != ad.rank) {
        throw std::invalid_argument("lora_apply: shape mismatch on " + ad.target);
    }
    Var y = matmul_nt(t, x, bind(base.w));
    if (base.b != nullptr) y = add_rowvec(t, y, bind(base.b));
    Var low = matmul_nt(t, x, bind(ad.down));          // T x r
    Var update = matmul_nt(t, low, bind(ad.up));       // T x out
    return add(t, y, scale(t, update, ad.scaling()));
}

void lora_merge(const LoraAdapter& ad, Matrix& base_weight) {
    if (ad.up->value.rows != base_weight.rows || ad.down->value.cols != base_weight.cols) {
        throw std::invalid_argument("lora_merge: shape mismatch on " + ad.target);
    }
    Matrix delta(base_weight.rows, base_weight.cols);
    kernels::matmul_nn(ad.up->value.data.data(), ad.down->value.data.data(), delta.data.data(),
                       ad.up->value.rows, ad.rank, ad.down->value.cols);
    const double s = ad.scaling();
    for (size_t i = 0; i < base_weight.data.size(); ++i) {
        base_weight.data[i] += s * delta.data[i];
    }
}

}  // namespace diffcap
