#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "diffcap/matrix.hpp"

namespace diffcap {

// Handle to a value recorded on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff over Matrix values. Ops append nodes whose backward
// closures scatter the node's gradient into its parents. backward() walks the
// nodes in reverse creation order, which is a topological order by
// construction. Tapes are single-owner; concurrency happens across tapes,
// never within one.
class Tape {
public:
    Var leaf(Matrix value);
    Var node(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> back);

    const Matrix& val(Var v) const { return nodes_[v.id].value; }
    Matrix& val_mut(Var v) { return nodes_[v.id].value; }

    // Gradient of the last backward() root w.r.t. v. Zero matrix if untouched.
    const Matrix& grad(Var v) const { return nodes_[v.id].grad; }
    Matrix& grad_mut(Var v) { return nodes_[v.id].grad; }

    void accumulate(int id, const Matrix& g);

    // Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates.
    void backward(Var root);
    void backward(Var root, const Matrix& seed);

    size_t size() const { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool touched = false;
        std::vector<int> parents;
        std::function<void(Tape&, int)> back;
    };
    std::deque<Node> nodes_;  // deque: val()/grad() references stay valid as nodes append
    friend class TapeTestAccess;
};

// ---- differentiable ops ------------------------------------------------

Var matmul(Tape& t, Var a, Var b);     // a(mxk) * b(kxn)
Var matmul_nt(Tape& t, Var a, Var b);  // a(mxk) * b(nxk)^T
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise
Var scale(Tape& t, Var a, double s);
Var add_rowvec(Tape& t, Var x, Var v);  // x(Txd) + broadcast v(1xd)
Var mul_rowvec(Tape& t, Var x, Var v);  // x(Txd) ⊙ broadcast v(1xd)
Var sigmoid(Tape& t, Var x);
Var gelu(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);
// Additive mask (0 or large negative) applied to logits before softmax.
Var softmax_rows_masked(Tape& t, Var x, const Matrix& add_mask);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta);  // per-row, gamma/beta 1xd
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var concat_rows(Tape& t, const std::vector<Var>& parts);
Var slice_cols(Tape& t, Var x, int c0, int c1);
Var slice_rows(Tape& t, Var x, int r0, int r1);
Var mean_rows(Tape& t, Var x);  // Txd -> 1xd
Var gather_rows(Tape& t, Var table, const std::vector<int>& ids);
Var assemble_rows(Tape& t, const std::vector<std::pair<Var, int>>& rows);  // one row each

// Mean over masked rows of cross-entropy between logits rows and targets.
// mask[i] in {0,1}; rows with mask 0 contribute nothing.
Var cross_entropy_masked(Tape& t, Var logits, const std::vector<int>& targets,
                         const std::vector<double>& mask);

// Non-differentiating helpers shared with generation.
void softmax_row_inplace(double* row, int n);
double log_sum_exp_row(const double* row, int n);

}  // namespace diffcap
