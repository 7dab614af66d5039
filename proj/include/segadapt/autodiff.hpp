#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "segadapt/tensor.hpp"

namespace segadapt::ad {

// Reverse-mode tape. Each Var is a node holding a value, an optional
// gradient buffer, and a closure that scatters the node's gradient into its
// parents. Ops whose parents all have requires_grad == false collapse to
// plain constants, so frozen branches cost no tape at all.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    explicit Node(Tensor value) : val(std::move(value)) {}

    void ensure_grad() {
        if (grad.v.size() != val.v.size()) grad = Tensor(val.shape);
    }

    void zero_grad() {
        if (grad.v.size() == val.v.size())
            std::fill(grad.v.begin(), grad.v.end(), 0.0);
    }
};

inline Var constant(Tensor t) { return std::make_shared<Node>(std::move(t)); }

inline Var constant_scalar(double x) { return constant(Tensor({1}, {x})); }

// A trainable (or probed) leaf.
inline Var leaf(Tensor t) {
    auto n = std::make_shared<Node>(std::move(t));
    n->requires_grad = true;
    return n;
}

inline Var make_op(std::vector<Var> parents, Tensor value, std::function<void(Node&)> back) {
    bool needs = false;
    for (const auto& p : parents) needs |= p->requires_grad;
    if (!needs) return constant(std::move(value));
    auto n = std::make_shared<Node>(std::move(value));
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(back);
    return n;
}

inline void accumulate(const Var& p, size_t i, double g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.v[i] += g;
}

// Runs backward from a scalar root. Parameter gradients accumulate, so
// callers zero them between steps.
inline void backward(const Var& root) {
    if (root->val.numel() != 1)
        throw InvalidArgument("ad::backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Topological order via iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.v[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.v.size() == n->val.v.size()) n->backward_fn(*n);
    }
}

// ---- elementwise ----

inline Var add(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "ad::add");
    Tensor out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->val.v[i];
    return make_op({a, b}, std::move(out), [a, b](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            accumulate(a, i, n.grad.v[i]);
            accumulate(b, i, n.grad.v[i]);
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "ad::sub");
    Tensor out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b->val.v[i];
    return make_op({a, b}, std::move(out), [a, b](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            accumulate(a, i, n.grad.v[i]);
            accumulate(b, i, -n.grad.v[i]);
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "ad::mul");
    Tensor out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b->val.v[i];
    return make_op({a, b}, std::move(out), [a, b](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            accumulate(a, i, n.grad.v[i] * b->val.v[i]);
            accumulate(b, i, n.grad.v[i] * a->val.v[i]);
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    require_same_shape(a->val, b->val, "ad::div");
    Tensor out = a->val;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] /= b->val.v[i];
    return make_op({a, b}, std::move(out), [a, b](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            const double bv = b->val.v[i];
            accumulate(a, i, n.grad.v[i] / bv);
            accumulate(b, i, -n.grad.v[i] * a->val.v[i] / (bv * bv));
        }
    });
}

// scale * a + shift, elementwise with scalar coefficients.
inline Var affine(const Var& a, double scale, double shift) {
    Tensor out = a->val;
    for (auto& x : out.v) x = scale * x + shift;
    return make_op({a}, std::move(out), [a, scale](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) accumulate(a, i, scale * n.grad.v[i]);
    });
}

inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

inline Var sigmoid(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    auto vals = std::make_shared<Tensor>(out);
    return make_op({a}, std::move(out), [a, vals](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            const double s = vals->v[i];
            accumulate(a, i, n.grad.v[i] * s * (1.0 - s));
        }
    });
}

inline Var vexp(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::exp(x);
    auto vals = std::make_shared<Tensor>(out);
    return make_op({a}, std::move(out), [a, vals](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i)
            accumulate(a, i, n.grad.v[i] * vals->v[i]);
    });
}

inline Var vlog(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::log(x);
    return make_op({a}, std::move(out), [a](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i)
            accumulate(a, i, n.grad.v[i] / a->val.v[i]);
    });
}

// a^p for a > 0. p == 0 yields the constant 1 map with zero gradient.
inline Var pow_const(const Var& a, double p) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::pow(x, p);
    return make_op({a}, std::move(out), [a, p](Node& n) {
        if (p == 0.0) return;
        for (size_t i = 0; i < n.grad.v.size(); ++i)
            accumulate(a, i, n.grad.v[i] * p * std::pow(a->val.v[i], p - 1.0));
    });
}

// Gradient passes through strictly inside [lo, hi] and is zero outside.
inline Var clamp(const Var& a, double lo, double hi) {
    Tensor out = a->val;
    for (auto& x : out.v) x = std::min(hi, std::max(lo, x));
    return make_op({a}, std::move(out), [a, lo, hi](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            const double x = a->val.v[i];
            if (x > lo && x < hi) accumulate(a, i, n.grad.v[i]);
        }
    });
}

inline Var gelu(const Var& a) {
    Tensor out = a->val;
    for (auto& x : out.v) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    return make_op({a}, std::move(out), [a](Node& n) {
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            const double x = a->val.v[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            accumulate(a, i, n.grad.v[i] * (cdf + x * pdf));
        }
    });
}

// ---- reductions ----

inline Var sum(const Var& a) {
    Tensor out({1}, {a->val.sum()});
    return make_op({a}, std::move(out), [a](Node& n) {
        const double g = n.grad.v[0];
        for (size_t i = 0; i < a->val.v.size(); ++i) accumulate(a, i, g);
    });
}

inline Var mean(const Var& a) { return affine(sum(a), 1.0 / static_cast<double>(a->val.numel()), 0.0); }

// [N,H,W] -> [N]: sum over the spatial grid of each map.
inline Var sum_maps(const Var& a) {
    if (a->val.ndim() != 3) throw InvalidArgument("ad::sum_maps: expected [N,H,W]");
    const int n_maps = a->val.dim(0);
    const size_t hw = static_cast<size_t>(a->val.dim(1)) * a->val.dim(2);
    Tensor out({n_maps});
    for (int j = 0; j < n_maps; ++j) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += a->val.v[j * hw + i];
        out.v[static_cast<size_t>(j)] = s;
    }
    return make_op({a}, std::move(out), [a, hw](Node& n) {
        for (size_t j = 0; j < n.grad.v.size(); ++j) {
            const double g = n.grad.v[j];
            for (size_t i = 0; i < hw; ++i) accumulate(a, j * hw + i, g);
        }
    });
}

// Sum of the diagonal of a square matrix -> scalar.
inline Var diag_sum(const Var& a) {
    if (a->val.ndim() != 2 || a->val.dim(0) != a->val.dim(1))
        throw InvalidArgument("ad::diag_sum: expected square matrix");
    const int n_rows = a->val.dim(0);
    double s = 0.0;
    for (int i = 0; i < n_rows; ++i) s += a->val.at(i, i);
    return make_op({a}, Tensor({1}, {s}), [a, n_rows](Node& n) {
        const double g = n.grad.v[0];
        for (int i = 0; i < n_rows; ++i)
            accumulate(a, static_cast<size_t>(i) * n_rows + i, g);
    });
}

// ---- shape ----

inline Var reshape(const Var& a, std::vector<int> new_shape) {
    if (Tensor::count(new_shape) != static_cast<long long>(a->val.numel()))
        throw InvalidArgument("ad::reshape: element count mismatch");
    Tensor out(std::move(new_shape), a->val.v);
    return make_op({a}, std::move(out), [a](Node& n) {
        for (size_t i = 0; i < n.grad.v.size(); ++i) accumulate(a, i, n.grad.v[i]);
    });
}

inline Var transpose(const Var& a) {
    if (a->val.ndim() != 2) throw InvalidArgument("ad::transpose: expected matrix");
    const int r = a->val.dim(0), c = a->val.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a->val.at(i, j);
    return make_op({a}, std::move(out), [a, r, c](Node& n) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                accumulate(a, static_cast<size_t>(i) * c + j, n.grad.at(j, i));
    });
}

// Stacks K same-shape [H,W] maps into [K,H,W].
inline Var stack_maps(const std::vector<Var>& maps) {
    if (maps.empty()) throw InvalidArgument("ad::stack_maps: empty input");
    const int h = maps[0]->val.dim(0), w = maps[0]->val.dim(1);
    const size_t hw = static_cast<size_t>(h) * w;
    Tensor out({static_cast<int>(maps.size()), h, w});
    for (size_t k = 0; k < maps.size(); ++k) {
        require_same_shape(maps[k]->val, maps[0]->val, "ad::stack_maps");
        std::copy(maps[k]->val.v.begin(), maps[k]->val.v.end(), out.v.begin() + k * hw);
    }
    std::vector<Var> parents = maps;
    return make_op(parents, std::move(out), [maps, hw](Node& n) {
        for (size_t k = 0; k < maps.size(); ++k)
            for (size_t i = 0; i < hw; ++i) accumulate(maps[k], i, n.grad.v[k * hw + i]);
    });
}

// Stacks N same-length [D] vectors into [N,D].
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw InvalidArgument("ad::stack_rows: empty input");
    const int d = static_cast<int>(rows[0]->val.numel());
    Tensor out({static_cast<int>(rows.size()), d});
    for (size_t k = 0; k < rows.size(); ++k) {
        if (static_cast<int>(rows[k]->val.numel()) != d)
            throw InvalidArgument("ad::stack_rows: length mismatch");
        std::copy(rows[k]->val.v.begin(), rows[k]->val.v.end(),
                  out.v.begin() + k * static_cast<size_t>(d));
    }
    std::vector<Var> parents = rows;
    return make_op(parents, std::move(out), [rows, d](Node& n) {
        for (size_t k = 0; k < rows.size(); ++k)
            for (int i = 0; i < d; ++i)
                accumulate(rows[k], static_cast<size_t>(i), n.grad.v[k * d + i]);
    });
}

// ---- linear algebra ----

inline Var matmul(const Var& a, const Var& b) {
    if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0))
        throw InvalidArgument("ad::matmul: incompatible shapes " + a->val.shape_str() + " x " +
                              b->val.shape_str());
    const int m = a->val.dim(0), k = a->val.dim(1), n_cols = b->val.dim(1);
    Tensor out({m, n_cols});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = a->val.at(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < n_cols; ++j) out.at(i, j) += av * b->val.at(p, j);
        }
    return make_op({a, b}, std::move(out), [a, b, m, k, n_cols](Node& n) {
        // dA = dC * B^T ; dB = A^T * dC
        if (a->requires_grad) {
            a->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n_cols; ++j) {
                    const double g = n.grad.at(i, j);
                    if (g == 0.0) continue;
                    for (int p = 0; p < k; ++p) a->grad.at(i, p) += g * b->val.at(p, j);
                }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    const double av = a->val.at(i, p);
                    if (av == 0.0) continue;
                    for (int j = 0; j < n_cols; ++j) b->grad.at(p, j) += av * n.grad.at(i, j);
                }
        }
    });
}

// X[m,n] + row vector b[n] broadcast over rows.
inline Var add_rowvec(const Var& x, const Var& b) {
    if (x->val.ndim() != 2 || static_cast<int>(b->val.numel()) != x->val.dim(1))
        throw InvalidArgument("ad::add_rowvec: incompatible shapes");
    const int m = x->val.dim(0), n_cols = x->val.dim(1);
    Tensor out = x->val;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n_cols; ++j) out.at(i, j) += b->val.v[static_cast<size_t>(j)];
    return make_op({x, b}, std::move(out), [x, b, m, n_cols](Node& n) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n_cols; ++j) {
                const double g = n.grad.at(i, j);
                accumulate(x, static_cast<size_t>(i) * n_cols + j, g);
                accumulate(b, static_cast<size_t>(j), g);
            }
    });
}

// Layer norm across the last dimension of [P,D] with affine gain/bias [D].
inline Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    if (x->val.ndim() != 2) throw InvalidArgument("ad::layernorm: expected [P,D]");
    const int p_rows = x->val.dim(0), d = x->val.dim(1);
    if (static_cast<int>(gain->val.numel()) != d || static_cast<int>(bias->val.numel()) != d)
        throw InvalidArgument("ad::layernorm: gain/bias size mismatch");

    Tensor out({p_rows, d});
    auto xhat = std::make_shared<Tensor>(Tensor({p_rows, d}));
    auto inv_std = std::make_shared<Tensor>(Tensor({p_rows}));
    for (int i = 0; i < p_rows; ++i) {
        double m = 0.0;
        for (int j = 0; j < d; ++j) m += x->val.at(i, j);
        m /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x->val.at(i, j) - m;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std->v[static_cast<size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (x->val.at(i, j) - m) * is;
            xhat->at(i, j) = xh;
            out.at(i, j) = gain->val.v[static_cast<size_t>(j)] * xh + bias->val.v[static_cast<size_t>(j)];
        }
    }
    return make_op({x, gain, bias}, std::move(out), [x, gain, bias, xhat, inv_std, p_rows, d](Node& n) {
        for (int i = 0; i < p_rows; ++i) {
            double sum_gdy = 0.0, sum_gdy_xhat = 0.0;
            for (int j = 0; j < d; ++j) {
                const double gdy = gain->val.v[static_cast<size_t>(j)] * n.grad.at(i, j);
                sum_gdy += gdy;
                sum_gdy_xhat += gdy * xhat->at(i, j);
            }
            const double is = inv_std->v[static_cast<size_t>(i)];
            for (int j = 0; j < d; ++j) {
                const double gdy = gain->val.v[static_cast<size_t>(j)] * n.grad.at(i, j);
                const double dx = (gdy - sum_gdy / d - xhat->at(i, j) * sum_gdy_xhat / d) * is;
                accumulate(x, static_cast<size_t>(i) * d + j, dx);
                accumulate(gain, static_cast<size_t>(j), n.grad.at(i, j) * xhat->at(i, j));
                accumulate(bias, static_cast<size_t>(j), n.grad.at(i, j));
            }
        }
    });
}

// ---- spatial ----

// Multiplies each channel plane of [D,H,W] by gate[d].
inline Var scale_channels(const Var& f, const Var& gate) {
    if (f->val.ndim() != 3 || static_cast<int>(gate->val.numel()) != f->val.dim(0))
        throw InvalidArgument("ad::scale_channels: incompatible shapes");
    const int d = f->val.dim(0);
    const size_t hw = static_cast<size_t>(f->val.dim(1)) * f->val.dim(2);
    Tensor out = f->val;
    for (int c = 0; c < d; ++c)
        for (size_t i = 0; i < hw; ++i) out.v[c * hw + i] *= gate->val.v[static_cast<size_t>(c)];
    return make_op({f, gate}, std::move(out), [f, gate, d, hw](Node& n) {
        for (int c = 0; c < d; ++c) {
            const double g = gate->val.v[static_cast<size_t>(c)];
            double acc = 0.0;
            for (size_t i = 0; i < hw; ++i) {
                const double gr = n.grad.v[c * hw + i];
                accumulate(f, c * hw + i, gr * g);
                acc += gr * f->val.v[c * hw + i];
            }
            accumulate(gate, static_cast<size_t>(c), acc);
        }
    });
}

// L2-normalizes the channel vector at every spatial location of [D,H,W].
inline Var l2norm_channels(const Var& f, double eps = 1e-8) {
    if (f->val.ndim() != 3) throw InvalidArgument("ad::l2norm_channels: expected [D,H,W]");
    const int d = f->val.dim(0);
    const size_t hw = static_cast<size_t>(f->val.dim(1)) * f->val.dim(2);
    Tensor out = f->val;
    auto norms = std::make_shared<std::vector<double>>(hw);
    for (size_t i = 0; i < hw; ++i) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += f->val.v[c * hw + i] * f->val.v[c * hw + i];
        const double nn = std::sqrt(s) + eps;
        (*norms)[i] = nn;
        for (int c = 0; c < d; ++c) out.v[c * hw + i] /= nn;
    }
    auto unit = std::make_shared<Tensor>(out);
    return make_op({f}, std::move(out), [f, unit, norms, d, hw](Node& n) {
        for (size_t i = 0; i < hw; ++i) {
            double udotg = 0.0;
            for (int c = 0; c < d; ++c) udotg += unit->v[c * hw + i] * n.grad.v[c * hw + i];
            const double nn = (*norms)[i];
            for (int c = 0; c < d; ++c)
                accumulate(f, c * hw + i, (n.grad.v[c * hw + i] - unit->v[c * hw + i] * udotg) / nn);
        }
    });
}

// Mean of channel vectors over the nonzero cells of a constant mask.
inline Var masked_pool(const Var& f, const Mask& m) {
    if (f->val.ndim() != 3 || f->val.dim(1) != m.h || f->val.dim(2) != m.w)
        throw InvalidArgument("ad::masked_pool: mask does not match feature grid");
    const int d = f->val.dim(0);
    const size_t hw = static_cast<size_t>(m.h) * m.w;
    double count = 0.0;
    for (uint8_t b : m.v) count += (b != 0);
    if (count == 0.0) throw InvalidArgument("ad::masked_pool: empty mask");
    Tensor out({d});
    for (int c = 0; c < d; ++c) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i)
            if (m.v[i]) s += f->val.v[c * hw + i];
        out.v[static_cast<size_t>(c)] = s / count;
    }
    auto mask = std::make_shared<Mask>(m);
    return make_op({f}, std::move(out), [f, mask, d, hw, count](Node& n) {
        for (int c = 0; c < d; ++c) {
            const double g = n.grad.v[static_cast<size_t>(c)] / count;
            for (size_t i = 0; i < hw; ++i)
                if (mask->v[i]) accumulate(f, c * hw + i, g);
        }
    });
}

// [s*s, h, w] -> [h*s, w*s]; cell (y, x) of the output reads channel
// (y%s)*s + (x%s) at input location (y/s, x/s).
inline Var pixel_shuffle(const Var& a, int s) {
    if (a->val.ndim() != 3 || a->val.dim(0) != s * s)
        throw InvalidArgument("ad::pixel_shuffle: expected [s*s,h,w]");
    const int h = a->val.dim(1), w = a->val.dim(2);
    const size_t hw = static_cast<size_t>(h) * w;
    Tensor out({h * s, w * s});
    for (int y = 0; y < h * s; ++y)
        for (int x = 0; x < w * s; ++x) {
            const int k = (y % s) * s + (x % s);
            out.at(y, x) = a->val.v[k * hw + static_cast<size_t>(y / s) * w + (x / s)];
        }
    return make_op({a}, std::move(out), [a, s, h, w, hw](Node& n) {
        for (int y = 0; y < h * s; ++y)
            for (int x = 0; x < w * s; ++x) {
                const int k = (y % s) * s + (x % s);
                accumulate(a, k * hw + static_cast<size_t>(y / s) * w + (x / s),
                           n.grad.at(y, x));
            }
    });
}

namespace detail {
struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1;  // weight of i1; weight of i0 is 1-w1
};

inline LerpAxis lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<size_t>(out));
    ax.i1.resize(static_cast<size_t>(out));
    ax.w1.resize(static_cast<size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
        const int lo = static_cast<int>(std::floor(src));
        const int hi = std::min(lo + 1, in - 1);
        ax.i0[static_cast<size_t>(o)] = lo;
        ax.i1[static_cast<size_t>(o)] = hi;
        ax.w1[static_cast<size_t>(o)] = src - lo;
    }
    return ax;
}
}  // namespace detail

// Bilinear upsample [h,w] -> [out_h, out_w] (half-pixel centers).
inline Var upsample_bilinear(const Var& a, int out_h, int out_w) {
    if (a->val.ndim() != 2) throw InvalidArgument("ad::upsample_bilinear: expected [h,w]");
    const int h = a->val.dim(0), w = a->val.dim(1);
    auto ay = std::make_shared<detail::LerpAxis>(detail::lerp_axis(h, out_h));
    auto ax = std::make_shared<detail::LerpAxis>(detail::lerp_axis(w, out_w));
    Tensor out({out_h, out_w});
    for (int y = 0; y < out_h; ++y) {
        const int y0 = ay->i0[static_cast<size_t>(y)], y1 = ay->i1[static_cast<size_t>(y)];
        const double wy = ay->w1[static_cast<size_t>(y)];
        for (int x = 0; x < out_w; ++x) {
            const int x0 = ax->i0[static_cast<size_t>(x)], x1 = ax->i1[static_cast<size_t>(x)];
            const double wx = ax->w1[static_cast<size_t>(x)];
            out.at(y, x) = (1 - wy) * ((1 - wx) * a->val.at(y0, x0) + wx * a->val.at(y0, x1)) +
                           wy * ((1 - wx) * a->val.at(y1, x0) + wx * a->val.at(y1, x1));
        }
    }
    return make_op({a}, std::move(out), [a, ay, ax, w, out_h, out_w](Node& n) {
        for (int y = 0; y < out_h; ++y) {
            const int y0 = ay->i0[static_cast<size_t>(y)], y1 = ay->i1[static_cast<size_t>(y)];
            const double wy = ay->w1[static_cast<size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const int x0 = ax->i0[static_cast<size_t>(x)], x1 = ax->i1[static_cast<size_t>(x)];
                const double wx = ax->w1[static_cast<size_t>(x)];
                const double g = n.grad.at(y, x);
                accumulate(a, static_cast<size_t>(y0) * w + x0, g * (1 - wy) * (1 - wx));
                accumulate(a, static_cast<size_t>(y0) * w + x1, g * (1 - wy) * wx);
                accumulate(a, static_cast<size_t>(y1) * w + x0, g * wy * (1 - wx));
                accumulate(a, static_cast<size_t>(y1) * w + x1, g * wy * wx);
            }
        }
    });
}

// a * s where s is a scalar Var (e.g. a learned coefficient).
inline Var scale_by_scalar(const Var& a, const Var& s) {
    if (s->val.numel() != 1) throw InvalidArgument("ad::scale_by_scalar: s must be scalar");
    const double sv = s->val.v[0];
    Tensor out = a->val;
    for (auto& x : out.v) x *= sv;
    return make_op({a, s}, std::move(out), [a, s, sv](Node& n) {
        double acc = 0.0;
        for (size_t i = 0; i < n.grad.v.size(); ++i) {
            accumulate(a, i, n.grad.v[i] * sv);
            acc += n.grad.v[i] * a->val.v[i];
        }
        accumulate(s, 0, acc);
    });
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

}  // namespace segadapt::ad
