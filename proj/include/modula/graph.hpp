#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "modula/tensor.hpp"

namespace modula {

using NodeId = int;

/// Reverse-mode tape. Nodes are appended in creation order, so inputs of
/// node k always have ids < k and backward() can walk ids in strictly
/// decreasing order. Leaves may be bound to external parameter tensors,
/// in which case gradients accumulate into the external tensor's grad.
///
/// A Graph is single-use for backward and must never be shared across
/// threads. Every op validates its output for NaN/Inf and throws on the
/// first non-finite value.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf bound to external storage. Gradients flow into `t.grad` when
    /// `t.requires_grad` is set.
    NodeId param(Tensor& t) {
        check_output(t, "param");
        Node n;
        n.op = "param";
        n.bound = &t;
        n.requires_grad = t.requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    /// Owned constant leaf, never differentiated.
    NodeId input(Tensor t) {
        check_output(t, "input");
        Node n;
        n.op = "input";
        n.owned = std::move(t);
        n.requires_grad = false;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size()) - 1;
    }

    const Tensor& value(NodeId id) const { return node(id).bound ? *node(id).bound : node(id).owned; }
    Tensor& value(NodeId id) { return node(id).bound ? *node(id).bound : node(id).owned; }

    bool requires_grad(NodeId id) const { return node(id).requires_grad; }
    size_t size() const { return nodes_.size(); }

    /// Generic op registration. `backward_fn(g, self)` must read
    /// g.value(self).grad and accumulate into the inputs' grads; it is
    /// only invoked when gradient actually reached this node. Standard
    /// ops below are built on this; tests may register their own.
    using BackwardFn = std::function<void(Graph&, NodeId)>;
    NodeId apply(const char* op, std::vector<NodeId> inputs, Tensor out, BackwardFn backward_fn) {
        check_output(out, op);
        NodeId self = static_cast<NodeId>(nodes_.size());
        bool req = false;
        for (NodeId i : inputs) {
            if (i < 0 || i >= self)
                throw std::invalid_argument(std::string(op) + ": input node id out of range");
            req = req || node(i).requires_grad;
        }
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.owned = std::move(out);
        n.requires_grad = req;
        n.backward_fn = std::move(backward_fn);
        nodes_.push_back(std::move(n));
        return self;
    }

    /// Seeds d(loss)/d(loss)=1 and walks the tape backwards once.
    /// Gradients accumulate additively, so separate graphs over the same
    /// parameters sum their contributions. Calling backward twice on one
    /// graph throws: build a fresh graph (and zero grads) instead.
    void backward(NodeId loss) {
        Tensor& lv = value(loss);
        if (!lv.is_scalar())
            throw std::invalid_argument("backward: loss must be scalar, got shape " + lv.shape_str());
        if (backward_done_)
            throw std::runtime_error("backward: this graph was already backpropagated; "
                                     "build a new graph and zero grads before differentiating again");
        backward_done_ = true;
        if (!node(loss).requires_grad) return;
        lv.ensure_grad();
        lv.grad[0] += 1.0;
        for (NodeId k = loss; k >= 0; --k) {
            Node& n = nodes_[static_cast<size_t>(k)];
            if (!n.requires_grad) continue;
            Tensor& v = n.bound ? *n.bound : n.owned;
            if (v.grad.empty()) continue;  // no gradient reached this node
            if (n.backward_fn) n.backward_fn(*this, k);
        }
    }

    bool backward_done() const { return backward_done_; }

    // ---- standard ops ------------------------------------------------

    /// C[m,n] = A[m,k] * B[k,n]; accumulation is sequential row-major.
    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        require_rank2(A, "matmul");
        require_rank2(B, "matmul");
        if (A.shape[1] != B.shape[0])
            throw std::invalid_argument("matmul: inner dimensions mismatch: " + A.shape_str() + " vs " +
                                        B.shape_str());
        int m = A.shape[0], k = A.shape[1], n = B.shape[1];
        Tensor C = Tensor::zeros({m, n});
        for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
                double av = A.at(i, p);
                if (av == 0.0) continue;
                for (int j = 0; j < n; ++j) C.at(i, j) += av * B.at(p, j);
            }
        return apply("matmul", {a, b}, std::move(C), [a, b, m, k, n](Graph& g, NodeId self) {
            const Tensor& dC = g.value(self);
            const Tensor& Av = g.value(a);
            const Tensor& Bv = g.value(b);
            if (g.requires_grad(a)) {
                Tensor& At = g.value(a);
                At.ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += dC.grad[static_cast<size_t>(i) * n + j] * Bv.at(p, j);
                        At.grad[static_cast<size_t>(i) * k + p] += s;
                    }
            }
            if (g.requires_grad(b)) {
                Tensor& Bt = g.value(b);
                Bt.ensure_grad();
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i) s += Av.at(i, p) * dC.grad[static_cast<size_t>(i) * n + j];
                        Bt.grad[static_cast<size_t>(p) * n + j] += s;
                    }
            }
        });
    }

    NodeId transpose(NodeId a) {
        const Tensor& A = value(a);
        require_rank2(A, "transpose");
        int m = A.shape[0], n = A.shape[1];
        Tensor C = Tensor::zeros({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) C.at(j, i) = A.at(i, j);
        return apply("transpose", {a}, std::move(C), [a, m, n](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& dC = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) At.grad[static_cast<size_t>(i) * n + j] += dC.grad[static_cast<size_t>(j) * m + i];
        });
    }

    NodeId add(NodeId a, NodeId b) { return add_like("add", a, b, +1.0); }
    NodeId sub(NodeId a, NodeId b) { return add_like("sub", a, b, -1.0); }

    /// Elementwise product.
    NodeId mul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.same_shape(B))
            throw std::invalid_argument("mul: shape mismatch: " + A.shape_str() + " vs " + B.shape_str());
        Tensor C = A;
        C.grad.clear();
        C.requires_grad = false;
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
        return apply("mul", {a, b}, std::move(C), [a, b](Graph& g, NodeId self) {
            const Tensor& dC = g.value(self);
            if (g.requires_grad(a)) {
                Tensor& At = g.value(a);
                const Tensor& Bv = g.value(b);
                At.ensure_grad();
                for (size_t i = 0; i < At.grad.size(); ++i) At.grad[i] += dC.grad[i] * Bv.data[i];
            }
            if (g.requires_grad(b)) {
                Tensor& Bt = g.value(b);
                const Tensor& Av = g.value(a);
                Bt.ensure_grad();
                for (size_t i = 0; i < Bt.grad.size(); ++i) Bt.grad[i] += dC.grad[i] * Av.data[i];
            }
        });
    }

    NodeId scale(NodeId a, double s) {
        Tensor C = value(a);
        C.grad.clear();
        C.requires_grad = false;
        for (double& v : C.data) v *= s;
        return apply("scale", {a}, std::move(C), [a, s](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& dC = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (size_t i = 0; i < At.grad.size(); ++i) At.grad[i] += s * dC.grad[i];
        });
    }

    /// y[i,j] = m[i,j] * w[i]; w is a length-rows vector (or [rows,1]).
    /// Used to weight per-token expert deltas by routing coefficients.
    NodeId row_scale(NodeId m, NodeId w) {
        const Tensor& M = value(m);
        const Tensor& W = value(w);
        require_rank2(M, "row_scale");
        if (W.numel() != M.shape[0])
            throw std::invalid_argument("row_scale: weight length " + std::to_string(W.numel()) +
                                        " does not match rows of " + M.shape_str());
        int rows = M.shape[0], cols = M.shape[1];
        Tensor C = Tensor::zeros({rows, cols});
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) C.at(i, j) = M.at(i, j) * W.data[static_cast<size_t>(i)];
        return apply("row_scale", {m, w}, std::move(C), [m, w, rows, cols](Graph& g, NodeId self) {
            const Tensor& dC = g.value(self);
            const Tensor& Mv = g.value(m);
            const Tensor& Wv = g.value(w);
            if (g.requires_grad(m)) {
                Tensor& Mt = g.value(m);
                Mt.ensure_grad();
                for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                        Mt.grad[static_cast<size_t>(i) * cols + j] +=
                            dC.grad[static_cast<size_t>(i) * cols + j] * Wv.data[static_cast<size_t>(i)];
            }
            if (g.requires_grad(w)) {
                Tensor& Wt = g.value(w);
                Wt.ensure_grad();
                for (int i = 0; i < rows; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < cols; ++j)
                        s += dC.grad[static_cast<size_t>(i) * cols + j] * Mv.at(i, j);
                    Wt.grad[static_cast<size_t>(i)] += s;
                }
            }
        });
    }

    /// Softmax over the last dimension (each row independently for rank
    /// 2), computed with max-subtraction.
    NodeId softmax(NodeId a) {
        const Tensor& A = value(a);
        if (A.numel() == 0) throw std::invalid_argument("softmax: empty input");
        int rows = A.rows(), cols = A.cols();
        Tensor C = A;
        C.grad.clear();
        C.requires_grad = false;
        for (int i = 0; i < rows; ++i) softmax_row(&C.data[static_cast<size_t>(i) * cols], cols);
        return apply("softmax", {a}, std::move(C), [a, rows, cols](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& Y = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (int i = 0; i < rows; ++i) {
                const double* y = &Y.data[static_cast<size_t>(i) * cols];
                const double* dy = &Y.grad[static_cast<size_t>(i) * cols];
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += dy[j] * y[j];
                for (int j = 0; j < cols; ++j)
                    At.grad[static_cast<size_t>(i) * cols + j] += y[j] * (dy[j] - dot);
            }
        });
    }

    /// Row i is a softmax over columns j <= i; entries above the
    /// diagonal are exactly zero. Input must be square [s,s].
    NodeId causal_softmax(NodeId a) {
        const Tensor& A = value(a);
        require_rank2(A, "causal_softmax");
        if (A.shape[0] != A.shape[1])
            throw std::invalid_argument("causal_softmax: scores must be square, got " + A.shape_str());
        int s = A.shape[0];
        Tensor C = Tensor::zeros({s, s});
        for (int i = 0; i < s; ++i) {
            for (int j = 0; j <= i; ++j) C.at(i, j) = A.at(i, j);
            softmax_row(&C.data[static_cast<size_t>(i) * s], i + 1);
        }
        return apply("causal_softmax", {a}, std::move(C), [a, s](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& Y = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (int i = 0; i < s; ++i) {
                const double* y = &Y.data[static_cast<size_t>(i) * s];
                const double* dy = &Y.grad[static_cast<size_t>(i) * s];
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) dot += dy[j] * y[j];
                for (int j = 0; j <= i; ++j)
                    At.grad[static_cast<size_t>(i) * s + j] += y[j] * (dy[j] - dot);
            }
        });
    }

    /// Elementwise x >= 0 ? x : slope*x. The subgradient at exactly 0 is
    /// taken as 1.
    NodeId leaky_relu(NodeId a, double slope) {
        if (!(slope >= 0.0 && slope < 1.0))
            throw std::invalid_argument("leaky_relu: slope must be in [0,1), got " + std::to_string(slope));
        Tensor C = value(a);
        C.grad.clear();
        C.requires_grad = false;
        for (double& v : C.data)
            if (v < 0.0) v *= slope;
        return apply("leaky_relu", {a}, std::move(C), [a, slope](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& dC = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (size_t i = 0; i < At.grad.size(); ++i)
                At.grad[i] += dC.grad[i] * (At.data[i] >= 0.0 ? 1.0 : slope);
        });
    }

    NodeId sum(NodeId a) {
        const Tensor& A = value(a);
        double s = 0.0;
        for (double v : A.data) s += v;
        return apply("sum", {a}, Tensor::scalar(s), [a](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            double d = g.value(self).grad[0];
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (double& v : At.grad) v += d;
        });
    }

    /// -log softmax(logits)[target], fused log-sum-exp. Logits must be a
    /// rank-1 vector.
    NodeId cross_entropy(NodeId logits, int target) {
        const Tensor& L = value(logits);
        if (L.rank() != 1)
            throw std::invalid_argument("cross_entropy: logits must be rank-1, got " + L.shape_str());
        int n = static_cast<int>(L.numel());
        if (target < 0 || target >= n)
            throw std::invalid_argument("cross_entropy: target " + std::to_string(target) +
                                        " out of range for " + std::to_string(n) + " logits");
        double lse = log_sum_exp(L.data.data(), n);
        return apply("cross_entropy", {logits}, Tensor::scalar(lse - L.data[static_cast<size_t>(target)]),
                     [logits, target, n](Graph& g, NodeId self) {
                         if (!g.requires_grad(logits)) return;
                         double d = g.value(self).grad[0];
                         Tensor& Lt = g.value(logits);
                         Lt.ensure_grad();
                         std::vector<double> p(Lt.data.begin(), Lt.data.end());
                         softmax_row(p.data(), n);
                         for (int j = 0; j < n; ++j)
                             Lt.grad[static_cast<size_t>(j)] +=
                                 d * (p[static_cast<size_t>(j)] - (j == target ? 1.0 : 0.0));
                     });
    }

    /// Mask-weighted mean of per-row cross entropies over a [s,V] logit
    /// matrix: sum_i mask[i]*ce(row_i, targets[i]) / sum_i mask[i].
    /// Rows with mask 0 are skipped entirely (their targets are ignored).
    NodeId cross_entropy_rows(NodeId logits, std::vector<int> targets, std::vector<double> mask) {
        const Tensor& L = value(logits);
        require_rank2(L, "cross_entropy_rows");
        int s = L.shape[0], v = L.shape[1];
        if (static_cast<int>(targets.size()) != s || static_cast<int>(mask.size()) != s)
            throw std::invalid_argument("cross_entropy_rows: targets/mask length must equal rows of " +
                                        L.shape_str());
        double total_mask = 0.0;
        for (double m : mask) {
            if (m < 0.0) throw std::invalid_argument("cross_entropy_rows: negative mask weight");
            total_mask += m;
        }
        if (total_mask <= 0.0) throw std::invalid_argument("cross_entropy_rows: mask selects no positions");
        double loss = 0.0;
        for (int i = 0; i < s; ++i) {
            if (mask[static_cast<size_t>(i)] == 0.0) continue;
            int t = targets[static_cast<size_t>(i)];
            if (t < 0 || t >= v)
                throw std::invalid_argument("cross_entropy_rows: target " + std::to_string(t) +
                                            " out of range for " + std::to_string(v) + " logits at row " +
                                            std::to_string(i));
            const double* row = &L.data[static_cast<size_t>(i) * v];
            loss += mask[static_cast<size_t>(i)] * (log_sum_exp(row, v) - row[t]);
        }
        loss /= total_mask;
        return apply("cross_entropy_rows", {logits}, Tensor::scalar(loss),
                     [logits, targets = std::move(targets), mask = std::move(mask), total_mask, s,
                      v](Graph& g, NodeId self) {
                         if (!g.requires_grad(logits)) return;
                         double d = g.value(self).grad[0];
                         Tensor& Lt = g.value(logits);
                         Lt.ensure_grad();
                         std::vector<double> p(static_cast<size_t>(v));
                         for (int i = 0; i < s; ++i) {
                             double w = mask[static_cast<size_t>(i)];
                             if (w == 0.0) continue;
                             const double* row = &Lt.data[static_cast<size_t>(i) * v];
                             std::copy(row, row + v, p.begin());
                             softmax_row(p.data(), v);
                             double c = d * w / total_mask;
                             int t = targets[static_cast<size_t>(i)];
                             for (int j = 0; j < v; ++j)
                                 Lt.grad[static_cast<size_t>(i) * v + j] +=
                                     c * (p[static_cast<size_t>(j)] - (j == t ? 1.0 : 0.0));
                         }
                     });
    }

    /// Gathers rows of `table` [V,d] at the given indices -> [s,d].
    NodeId embedding(NodeId table, std::vector<int> ids) {
        const Tensor& T = value(table);
        require_rank2(T, "embedding");
        if (ids.empty()) throw std::invalid_argument("embedding: empty index list");
        int v = T.shape[0], d = T.shape[1];
        for (int id : ids)
            if (id < 0 || id >= v)
                throw std::invalid_argument("embedding: index " + std::to_string(id) + " out of range for " +
                                            std::to_string(v) + " rows");
        int s = static_cast<int>(ids.size());
        Tensor C = Tensor::zeros({s, d});
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < d; ++j) C.at(i, j) = T.at(ids[static_cast<size_t>(i)], j);
        return apply("embedding", {table}, std::move(C), [table, ids = std::move(ids), d](Graph& g, NodeId self) {
            if (!g.requires_grad(table)) return;
            const Tensor& dC = g.value(self);
            Tensor& Tt = g.value(table);
            Tt.ensure_grad();
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    Tt.grad[static_cast<size_t>(ids[i]) * d + j] += dC.grad[i * static_cast<size_t>(d) + j];
        });
    }

    /// Row-wise RMS normalization with a learned gain:
    /// y[i,j] = x[i,j] * gain[j] / sqrt(mean_j(x[i,j]^2) + eps).
    NodeId rms_norm(NodeId x, NodeId gain, double eps = 1e-5) {
        const Tensor& X = value(x);
        const Tensor& G = value(gain);
        require_rank2(X, "rms_norm");
        if (G.numel() != X.shape[1])
            throw std::invalid_argument("rms_norm: gain length " + std::to_string(G.numel()) +
                                        " does not match columns of " + X.shape_str());
        int s = X.shape[0], d = X.shape[1];
        Tensor C = Tensor::zeros({s, d});
        std::vector<double> rms(static_cast<size_t>(s));
        for (int i = 0; i < s; ++i) {
            double ss = 0.0;
            for (int j = 0; j < d; ++j) ss += X.at(i, j) * X.at(i, j);
            rms[static_cast<size_t>(i)] = std::sqrt(ss / d + eps);
            for (int j = 0; j < d; ++j) C.at(i, j) = X.at(i, j) * G.data[static_cast<size_t>(j)] / rms[static_cast<size_t>(i)];
        }
        return apply("rms_norm", {x, gain}, std::move(C),
                     [x, gain, rms = std::move(rms), s, d](Graph& g, NodeId self) {
                         const Tensor& dY = g.value(self);
                         const Tensor& Xv = g.value(x);
                         const Tensor& Gv = g.value(gain);
                         if (g.requires_grad(x)) {
                             Tensor& Xt = g.value(x);
                             Xt.ensure_grad();
                             for (int i = 0; i < s; ++i) {
                                 double r = rms[static_cast<size_t>(i)];
                                 double dot = 0.0;
                                 for (int j = 0; j < d; ++j)
                                     dot += dY.grad[static_cast<size_t>(i) * d + j] * Gv.data[static_cast<size_t>(j)] * Xv.at(i, j);
                                 for (int j = 0; j < d; ++j)
                                     Xt.grad[static_cast<size_t>(i) * d + j] +=
                                         dY.grad[static_cast<size_t>(i) * d + j] * Gv.data[static_cast<size_t>(j)] / r -
                                         Xv.at(i, j) * dot / (d * r * r * r);
                             }
                         }
                         if (g.requires_grad(gain)) {
                             Tensor& Gt = g.value(gain);
                             Gt.ensure_grad();
                             for (int i = 0; i < s; ++i)
                                 for (int j = 0; j < d; ++j)
                                     Gt.grad[static_cast<size_t>(j)] +=
                                         dY.grad[static_cast<size_t>(i) * d + j] * Xv.at(i, j) / rms[static_cast<size_t>(i)];
                         }
                     });
    }

    /// Columns [c0, c1) of a rank-2 tensor.
    NodeId slice_cols(NodeId a, int c0, int c1) {
        const Tensor& A = value(a);
        require_rank2(A, "slice_cols");
        if (c0 < 0 || c1 > A.shape[1] || c0 >= c1)
            throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                        ") invalid for " + A.shape_str());
        int s = A.shape[0], w = c1 - c0, n = A.shape[1];
        Tensor C = Tensor::zeros({s, w});
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < w; ++j) C.at(i, j) = A.at(i, c0 + j);
        return apply("slice_cols", {a}, std::move(C), [a, c0, s, w, n](Graph& g, NodeId self) {
            if (!g.requires_grad(a)) return;
            const Tensor& dC = g.value(self);
            Tensor& At = g.value(a);
            At.ensure_grad();
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < w; ++j)
                    At.grad[static_cast<size_t>(i) * n + c0 + j] += dC.grad[static_cast<size_t>(i) * w + j];
        });
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
        int s = value(parts[0]).shape[0];
        int total = 0;
        std::vector<int> widths;
        for (NodeId p : parts) {
            const Tensor& T = value(p);
            require_rank2(T, "concat_cols");
            if (T.shape[0] != s)
                throw std::invalid_argument("concat_cols: row mismatch: " + T.shape_str());
            widths.push_back(T.shape[1]);
            total += T.shape[1];
        }
        Tensor C = Tensor::zeros({s, total});
        int off = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor& T = value(parts[pi]);
            for (int i = 0; i < s; ++i)
                for (int j = 0; j < widths[pi]; ++j) C.at(i, off + j) = T.at(i, j);
            off += widths[pi];
        }
        return apply("concat_cols", parts, std::move(C),
                     [parts, widths = std::move(widths), s, total](Graph& g, NodeId self) {
                         const Tensor& dC = g.value(self);
                         int off = 0;
                         for (size_t pi = 0; pi < parts.size(); ++pi) {
                             if (g.requires_grad(parts[pi])) {
                                 Tensor& Pt = g.value(parts[pi]);
                                 Pt.ensure_grad();
                                 for (int i = 0; i < s; ++i)
                                     for (int j = 0; j < widths[pi]; ++j)
                                         Pt.grad[static_cast<size_t>(i) * widths[pi] + j] +=
                                             dC.grad[static_cast<size_t>(i) * total + off + j];
                             }
                             off += widths[pi];
                         }
                     });
    }

    // ---- helpers ------------------------------------------------------

    static void softmax_row(double* row, int n) {
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= sum;
    }

    static double log_sum_exp(const double* row, int n) {
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        return mx + std::log(sum);
    }

private:
    struct Node {
        const char* op = "";
        std::vector<NodeId> inputs;
        Tensor owned;
        Tensor* bound = nullptr;
        bool requires_grad = false;
        BackwardFn backward_fn;
    };

    Node& node(NodeId id) {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
            throw std::out_of_range("graph: node id " + std::to_string(id) + " out of range");
        return nodes_[static_cast<size_t>(id)];
    }
    const Node& node(NodeId id) const {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
            throw std::out_of_range("graph: node id " + std::to_string(id) + " out of range");
        return nodes_[static_cast<size_t>(id)];
    }

    static void require_rank2(const Tensor& t, const char* op) {
        if (t.rank() != 2)
            throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + t.shape_str());
    }

    static void check_output(const Tensor& t, const char* op) {
        if (!all_finite(t))
            throw std::runtime_error(std::string(op) + ": non-finite value in output");
    }

    NodeId add_like(const char* op, NodeId a, NodeId b, double sign) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.same_shape(B))
            throw std::invalid_argument(std::string(op) + ": shape mismatch: " + A.shape_str() + " vs " +
                                        B.shape_str());
        Tensor C = A;
        C.grad.clear();
        C.requires_grad = false;
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] += sign * B.data[i];
        return apply(op, {a, b}, std::move(C), [a, b, sign](Graph& g, NodeId self) {
            const Tensor& dC = g.value(self);
            if (g.requires_grad(a)) {
                Tensor& At = g.value(a);
                At.ensure_grad();
                for (size_t i = 0; i < At.grad.size(); ++i) At.grad[i] += dC.grad[i];
            }
            if (g.requires_grad(b)) {
                Tensor& Bt = g.value(b);
                Bt.ensure_grad();
                for (size_t i = 0; i < Bt.grad.size(); ++i) Bt.grad[i] += sign * dC.grad[i];
            }
        });
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace modula
