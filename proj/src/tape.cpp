#include "diffcap/tape.hpp"

#include <algorithm>
#include <cmath>

#include "diffcap/kernels.hpp"

namespace diffcap {

Var Tape::leaf(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::node(Matrix value, std::vector<int> parents, std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& n = nodes_[id];
    if (!n.touched) {
        n.grad = Matrix(n.value.rows, n.value.cols);
        n.touched = true;
    }
    for (size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
}

void Tape::backward(Var root) {
    Matrix seed(1, 1);
    seed(0, 0) = 1.0;
    backward(root, seed);
}

void Tape::backward(Var root, const Matrix& seed) {
    if (!root.valid() || root.id >= static_cast<int>(nodes_.size())) {
        throw std::invalid_argument("Tape::backward: invalid root");
    }
    for (Node& n : nodes_) {
        n.touched = false;
        n.grad = Matrix();
    }
    accumulate(root.id, seed);
    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.touched && n.back) n.back(*this, id);
    }
}

void Tape::clear() { nodes_.clear(); }

namespace {

const Matrix& V(Tape& t, int id) { return t.val(Var{id}); }

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (A.cols != B.rows) {
        throw std::invalid_argument("matmul: inner dims " + shape_str(A) + " vs " + shape_str(B));
    }
    Matrix C(A.rows, B.cols);
    kernels::matmul_nn(A.data.data(), B.data.data(), C.data.data(), A.rows, A.cols, B.cols);
    return t.node(std::move(C), {a.id, b.id}, [a, b](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& A_ = V(tt, a.id);
        const Matrix& B_ = V(tt, b.id);
        Matrix da(A_.rows, A_.cols);
        kernels::matmul_nt(g.data.data(), B_.data.data(), da.data.data(), g.rows, g.cols, B_.rows);
        tt.accumulate(a.id, da);
        Matrix db(B_.rows, B_.cols);
        kernels::matmul_tn(A_.data.data(), g.data.data(), db.data.data(), A_.rows, A_.cols, g.cols);
        tt.accumulate(b.id, db);
    });
}

Var matmul_nt(Tape& t, Var a, Var b) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (A.cols != B.cols) {
        throw std::invalid_argument("matmul_nt: inner dims " + shape_str(A) + " vs " + shape_str(B));
    }
    Matrix C(A.rows, B.rows);
    kernels::matmul_nt(A.data.data(), B.data.data(), C.data.data(), A.rows, A.cols, B.rows);
    return t.node(std::move(C), {a.id, b.id}, [a, b](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});  // m x n
        const Matrix& A_ = V(tt, a.id);        // m x k
        const Matrix& B_ = V(tt, b.id);        // n x k
        Matrix da(A_.rows, A_.cols);
        kernels::matmul_nn(g.data.data(), B_.data.data(), da.data.data(), g.rows, g.cols, B_.cols);
        tt.accumulate(a.id, da);
        Matrix db(B_.rows, B_.cols);
        kernels::matmul_tn(g.data.data(), A_.data.data(), db.data.data(), g.rows, g.cols, A_.cols);
        tt.accumulate(b.id, db);
    });
}

Var add(Tape& t, Var a, Var b) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (!A.same_shape(B)) {
        throw std::invalid_argument("add: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
    }
    Matrix C = A;
    for (size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    return t.node(std::move(C), {a.id, b.id}, [a, b](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        tt.accumulate(a.id, g);
        tt.accumulate(b.id, g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (!A.same_shape(B)) {
        throw std::invalid_argument("sub: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
    }
    Matrix C = A;
    for (size_t i = 0; i < C.data.size(); ++i) C.data[i] -= B.data[i];
    return t.node(std::move(C), {a.id, b.id}, [a, b](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        tt.accumulate(a.id, g);
        Matrix neg = g;
        for (double& v : neg.data) v = -v;
        tt.accumulate(b.id, neg);
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Matrix& A = t.val(a);
    const Matrix& B = t.val(b);
    if (!A.same_shape(B)) {
        throw std::invalid_argument("mul: shape mismatch " + shape_str(A) + " vs " + shape_str(B));
    }
    Matrix C = A;
    for (size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
    return t.node(std::move(C), {a.id, b.id}, [a, b](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& A_ = V(tt, a.id);
        const Matrix& B_ = V(tt, b.id);
        Matrix da = g;
        for (size_t i = 0; i < da.data.size(); ++i) da.data[i] *= B_.data[i];
        tt.accumulate(a.id, da);
        Matrix db = g;
        for (size_t i = 0; i < db.data.size(); ++i) db.data[i] *= A_.data[i];
        tt.accumulate(b.id, db);
    });
}

Var scale(Tape& t, Var a, double s) {
    Matrix C = t.val(a);
    for (double& v : C.data) v *= s;
    return t.node(std::move(C), {a.id}, [a, s](Tape& tt, int self) {
        Matrix g = tt.grad(Var{self});
        for (double& v : g.data) v *= s;
        tt.accumulate(a.id, g);
    });
}

Var add_rowvec(Tape& t, Var x, Var v) {
    const Matrix& X = t.val(x);
    const Matrix& Vv = t.val(v);
    if (Vv.rows != 1 || Vv.cols != X.cols) {
        throw std::invalid_argument("add_rowvec: bias shape " + shape_str(Vv) + " vs " + shape_str(X));
    }
    Matrix C = X;
    for (int i = 0; i < C.rows; ++i) {
        double* r = C.row(i);
        for (int j = 0; j < C.cols; ++j) r[j] += Vv.data[j];
    }
    return t.node(std::move(C), {x.id, v.id}, [x, v](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        tt.accumulate(x.id, g);
        Matrix dv(1, g.cols);
        for (int i = 0; i < g.rows; ++i) {
            const double* r = g.row(i);
            for (int j = 0; j < g.cols; ++j) dv.data[j] += r[j];
        }
        tt.accumulate(v.id, dv);
    });
}

Var mul_rowvec(Tape& t, Var x, Var v) {
    const Matrix& X = t.val(x);
    const Matrix& Vv = t.val(v);
    if (Vv.rows != 1 || Vv.cols != X.cols) {
        throw std::invalid_argument("mul_rowvec: vec shape " + shape_str(Vv) + " vs " + shape_str(X));
    }
    Matrix C = X;
    for (int i = 0; i < C.rows; ++i) {
        double* r = C.row(i);
        for (int j = 0; j < C.cols; ++j) r[j] *= Vv.data[j];
    }
    return t.node(std::move(C), {x.id, v.id}, [x, v](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        const Matrix& V_ = V(tt, v.id);
        Matrix dx = g;
        for (int i = 0; i < dx.rows; ++i) {
            double* r = dx.row(i);
            for (int j = 0; j < dx.cols; ++j) r[j] *= V_.data[j];
        }
        tt.accumulate(x.id, dx);
        Matrix dv(1, g.cols);
        for (int i = 0; i < g.rows; ++i) {
            const double* gr = g.row(i);
            const double* xr = X_.row(i);
            for (int j = 0; j < g.cols; ++j) dv.data[j] += gr[j] * xr[j];
        }
        tt.accumulate(v.id, dv);
    });
}

Var sigmoid(Tape& t, Var x) {
    Matrix C = t.val(x);
    for (double& v : C.data) v = 1.0 / (1.0 + std::exp(-v));
    return t.node(std::move(C), {x.id}, [x](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& y = tt.val(Var{self});
        Matrix dx = g;
        for (size_t i = 0; i < dx.data.size(); ++i) {
            dx.data[i] *= y.data[i] * (1.0 - y.data[i]);
        }
        tt.accumulate(x.id, dx);
    });
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Var gelu(Tape& t, Var x) {
    Matrix C = t.val(x);
    for (double& v : C.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return t.node(std::move(C), {x.id}, [x](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        Matrix dx = g;
        for (size_t i = 0; i < dx.data.size(); ++i) {
            const double v = X_.data[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            dx.data[i] *= cdf + v * pdf;
        }
        tt.accumulate(x.id, dx);
    });
}

void softmax_row_inplace(double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    for (int j = 0; j < n; ++j) row[j] /= sum;
}

double log_sum_exp_row(const double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
    return mx + std::log(sum);
}

namespace {

Var softmax_impl(Tape& t, Var x, const Matrix* add_mask) {
    Matrix C = t.val(x);
    if (add_mask != nullptr) {
        if (!C.same_shape(*add_mask)) {
            throw std::invalid_argument("softmax mask shape " + shape_str(*add_mask) + " vs " + shape_str(C));
        }
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] += add_mask->data[i];
    }
    for (int i = 0; i < C.rows; ++i) softmax_row_inplace(C.row(i), C.cols);
    return t.node(std::move(C), {x.id}, [x](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& y = tt.val(Var{self});
        Matrix dx(g.rows, g.cols);
        for (int i = 0; i < g.rows; ++i) {
            const double* gr = g.row(i);
            const double* yr = y.row(i);
            double dot = 0.0;
            for (int j = 0; j < g.cols; ++j) dot += gr[j] * yr[j];
            double* dr = dx.row(i);
            for (int j = 0; j < g.cols; ++j) dr[j] = yr[j] * (gr[j] - dot);
        }
        tt.accumulate(x.id, dx);
    });
}

}  // namespace

Var softmax_rows(Tape& t, Var x) { return softmax_impl(t, x, nullptr); }

Var softmax_rows_masked(Tape& t, Var x, const Matrix& add_mask) { return softmax_impl(t, x, &add_mask); }

Var layer_norm(Tape& t, Var x, Var gamma, Var beta) {
    const Matrix& X = t.val(x);
    const Matrix& G = t.val(gamma);
    const Matrix& B = t.val(beta);
    if (G.rows != 1 || G.cols != X.cols || B.rows != 1 || B.cols != X.cols) {
        throw std::invalid_argument("layer_norm: param shapes vs " + shape_str(X));
    }
    constexpr double kEps = 1e-5;
    Matrix C(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
        const double* xr = X.row(i);
        double mean = 0.0;
        for (int j = 0; j < X.cols; ++j) mean += xr[j];
        mean /= X.cols;
        double var = 0.0;
        for (int j = 0; j < X.cols; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= X.cols;
        const double inv = 1.0 / std::sqrt(var + kEps);
        double* cr = C.row(i);
        for (int j = 0; j < X.cols; ++j) {
            cr[j] = G.data[j] * ((xr[j] - mean) * inv) + B.data[j];
        }
    }
    return t.node(std::move(C), {x.id, gamma.id, beta.id}, [x, gamma, beta](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        const Matrix& G_ = V(tt, gamma.id);
        const int d = X_.cols;
        Matrix dx(X_.rows, d);
        Matrix dgamma(1, d);
        Matrix dbeta(1, d);
        for (int i = 0; i < X_.rows; ++i) {
            const double* xr = X_.row(i);
            const double* gr = g.row(i);
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) {
                const double dv = xr[j] - mean;
                var += dv * dv;
            }
            var /= d;
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            // xhat, dxhat, and the two row means that appear in d(xhat)/dx.
            double mean_dxhat = 0.0;
            double mean_dxhat_xhat = 0.0;
            std::vector<double> xhat(d), dxhat(d);
            for (int j = 0; j < d; ++j) {
                xhat[j] = (xr[j] - mean) * inv;
                dxhat[j] = gr[j] * G_.data[j];
                mean_dxhat += dxhat[j];
                mean_dxhat_xhat += dxhat[j] * xhat[j];
                dgamma.data[j] += gr[j] * xhat[j];
                dbeta.data[j] += gr[j];
            }
            mean_dxhat /= d;
            mean_dxhat_xhat /= d;
            double* dr = dx.row(i);
            for (int j = 0; j < d; ++j) {
                dr[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        tt.accumulate(x.id, dx);
        tt.accumulate(gamma.id, dgamma);
        tt.accumulate(beta.id, dbeta);
    });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const int rows = t.val(parts[0]).rows;
    int cols = 0;
    for (Var p : parts) {
        const Matrix& m = t.val(p);
        if (m.rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += m.cols;
    }
    Matrix C(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Matrix& m = t.val(p);
        for (int i = 0; i < rows; ++i) {
            std::copy(m.row(i), m.row(i) + m.cols, C.row(i) + off);
        }
        off += m.cols;
    }
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    return t.node(std::move(C), ids, [ids](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        int off2 = 0;
        for (int pid : ids) {
            const Matrix& m = V(tt, pid);
            Matrix dp(m.rows, m.cols);
            for (int i = 0; i < m.rows; ++i) {
                std::copy(g.row(i) + off2, g.row(i) + off2 + m.cols, dp.row(i));
            }
            tt.accumulate(pid, dp);
            off2 += m.cols;
        }
    });
}

Var concat_rows(Tape& t, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const int cols = t.val(parts[0]).cols;
    int rows = 0;
    for (Var p : parts) {
        const Matrix& m = t.val(p);
        if (m.cols != cols) throw std::invalid_argument("concat_rows: col mismatch");
        rows += m.rows;
    }
    Matrix C(rows, cols);
    int off = 0;
    for (Var p : parts) {
        const Matrix& m = t.val(p);
        std::copy(m.data.begin(), m.data.end(), C.data.begin() + static_cast<size_t>(off) * cols);
        off += m.rows;
    }
    std::vector<int> ids;
    for (Var p : parts) ids.push_back(p.id);
    return t.node(std::move(C), ids, [ids](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        int off2 = 0;
        for (int pid : ids) {
            const Matrix& m = V(tt, pid);
            Matrix dp(m.rows, m.cols);
            std::copy(g.data.begin() + static_cast<size_t>(off2) * g.cols,
                      g.data.begin() + static_cast<size_t>(off2 + m.rows) * g.cols, dp.data.begin());
            tt.accumulate(pid, dp);
            off2 += m.rows;
        }
    });
}

Var slice_cols(Tape& t, Var x, int c0, int c1) {
    const Matrix& X = t.val(x);
    if (c0 < 0 || c1 > X.cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
    Matrix C(X.rows, c1 - c0);
    for (int i = 0; i < X.rows; ++i) {
        std::copy(X.row(i) + c0, X.row(i) + c1, C.row(i));
    }
    return t.node(std::move(C), {x.id}, [x, c0, c1](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        Matrix dx(X_.rows, X_.cols);
        for (int i = 0; i < X_.rows; ++i) {
            std::copy(g.row(i), g.row(i) + (c1 - c0), dx.row(i) + c0);
        }
        tt.accumulate(x.id, dx);
    });
}

Var slice_rows(Tape& t, Var x, int r0, int r1) {
    const Matrix& X = t.val(x);
    if (r0 < 0 || r1 > X.rows || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
    Matrix C(r1 - r0, X.cols);
    std::copy(X.data.begin() + static_cast<size_t>(r0) * X.cols,
              X.data.begin() + static_cast<size_t>(r1) * X.cols, C.data.begin());
    return t.node(std::move(C), {x.id}, [x, r0, r1](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        Matrix dx(X_.rows, X_.cols);
        std::copy(g.data.begin(), g.data.end(), dx.data.begin() + static_cast<size_t>(r0) * X_.cols);
        tt.accumulate(x.id, dx);
    });
}

Var mean_rows(Tape& t, Var x) {
    const Matrix& X = t.val(x);
    Matrix C(1, X.cols);
    for (int i = 0; i < X.rows; ++i) {
        const double* r = X.row(i);
        for (int j = 0; j < X.cols; ++j) C.data[j] += r[j];
    }
    for (double& v : C.data) v /= X.rows;
    return t.node(std::move(C), {x.id}, [x](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& X_ = V(tt, x.id);
        Matrix dx(X_.rows, X_.cols);
        const double inv = 1.0 / X_.rows;
        for (int i = 0; i < X_.rows; ++i) {
            double* r = dx.row(i);
            for (int j = 0; j < X_.cols; ++j) r[j] = g.data[j] * inv;
        }
        tt.accumulate(x.id, dx);
    });
}

Var gather_rows(Tape& t, Var table, const std::vector<int>& ids) {
    const Matrix& T = t.val(table);
    Matrix C(static_cast<int>(ids.size()), T.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= T.rows) throw std::invalid_argument("gather_rows: id out of range");
        std::copy(T.row(ids[i]), T.row(ids[i]) + T.cols, C.row(static_cast<int>(i)));
    }
    return t.node(std::move(C), {table.id}, [table, ids](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        const Matrix& T_ = V(tt, table.id);
        Matrix dt(T_.rows, T_.cols);
        for (size_t i = 0; i < ids.size(); ++i) {
            const double* gr = g.row(static_cast<int>(i));
            double* tr = dt.row(ids[i]);
            for (int j = 0; j < T_.cols; ++j) tr[j] += gr[j];
        }
        tt.accumulate(table.id, dt);
    });
}

Var assemble_rows(Tape& t, const std::vector<std::pair<Var, int>>& rows) {
    if (rows.empty()) throw std::invalid_argument("assemble_rows: empty");
    const int cols = t.val(rows[0].first).cols;
    Matrix C(static_cast<int>(rows.size()), cols);
    std::vector<int> ids;
    for (size_t i = 0; i < rows.size(); ++i) {
        const Matrix& m = t.val(rows[i].first);
        if (m.cols != cols || rows[i].second < 0 || rows[i].second >= m.rows) {
            throw std::invalid_argument("assemble_rows: bad source row");
        }
        std::copy(m.row(rows[i].second), m.row(rows[i].second) + cols, C.row(static_cast<int>(i)));
        ids.push_back(rows[i].first.id);
    }
    auto srcs = rows;
    return t.node(std::move(C), ids, [srcs](Tape& tt, int self) {
        const Matrix& g = tt.grad(Var{self});
        for (size_t i = 0; i < srcs.size(); ++i) {
            const Matrix& m = V(tt, srcs[i].first.id);
            Matrix dm(m.rows, m.cols);
            std::copy(g.row(static_cast<int>(i)), g.row(static_cast<int>(i)) + g.cols,
                      dm.row(srcs[i].second));
            tt.accumulate(srcs[i].first.id, dm);
        }
    });
}

Var cross_entropy_masked(Tape& t, Var logits, const std::vector<int>& targets,
                         const std::vector<double>& mask) {
    const Matrix& L = t.val(logits);
    if (targets.size() != static_cast<size_t>(L.rows) || mask.size() != targets.size()) {
        throw std::invalid_argument("cross_entropy_masked: length mismatch");
    }
    double denom = 0.0;
    for (double m : mask) denom += m;
    if (denom <= 0.0) throw std::invalid_argument("cross_entropy_masked: empty mask");
    double loss = 0.0;
    for (int i = 0; i < L.rows; ++i) {
        if (mask[i] == 0.0) continue;
        const double lse = log_sum_exp_row(L.row(i), L.cols);
        loss += mask[i] * (lse - L(i, targets[i]));
    }
    Matrix C(1, 1);
    C(0, 0) = loss / denom;
    return t.node(std::move(C), {logits.id}, [logits, targets, mask, denom](Tape& tt, int self) {
        const double g = tt.grad(Var{self})(0, 0);
        const Matrix& L_ = V(tt, logits.id);
        Matrix dl(L_.rows, L_.cols);
        for (int i = 0; i < L_.rows; ++i) {
            if (mask[i] == 0.0) continue;
            std::vector<double> p(L_.row(i), L_.row(i) + L_.cols);
            softmax_row_inplace(p.data(), L_.cols);
            double* dr = dl.row(i);
            const double w = g * mask[i] / denom;
            for (int j = 0; j < L_.cols; ++j) dr[j] = w * p[j];
            dr[targets[i]] -= w;
        }
        tt.accumulate(logits.id, dl);
    });
}

}  // namespace diffcap
