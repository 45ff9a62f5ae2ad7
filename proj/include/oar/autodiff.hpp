#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "oar/ops.hpp"
#include "oar/params.hpp"
#include "oar/tensor.hpp"

namespace oar {

// Define-by-run reverse-mode tape. Node ids are creation-ordered, so the
// reverse of creation order is a valid topological order for backward.
template <typename T>
class Graph {
public:
    using NodeId = int;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    NodeId input(TensorT<T> v) { return push(std::move(v), false, nullptr, {}); }

    NodeId param(Param<T>& p) {
        NodeId id = push(p.value, true, &p, {});
        return id;
    }

    const TensorT<T>& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }
    const TensorT<T>& grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    NodeId conv2d(NodeId x, NodeId w, NodeId b, int stride, int padding) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const auto& bv = val(b);
        if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) {
            throw ShapeError("conv2d bias shape " + shape_str(bv.shape) + " vs kernel " + shape_str(wv.shape));
        }
        TensorT<T> out = oar::conv2d(xv, wv, bv.data, stride, padding);
        NodeId id = push(std::move(out), any_grad({x, w, b}), nullptr, {x, w, b});
        node(id).backward = [this, id, x, w, b, stride, padding]() {
            const auto& xv = val(x);
            const auto& wv = val(w);
            const auto& gy = node(id).grad;
            const int cin = xv.dim(0), h = xv.dim(1), ww = xv.dim(2);
            const int cout = wv.dim(0), k = wv.dim(2);
            const int oh = gy.dim(1), ow = gy.dim(2);
            TensorT<T>* gx = grad_buf(x);
            TensorT<T>* gw = grad_buf(w);
            TensorT<T>* gb = grad_buf(b);
            for (int oc = 0; oc < cout; ++oc) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const T g = gy.data[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox];
                        if (g == T(0)) continue;
                        if (gb) gb->data[static_cast<std::size_t>(oc)] += g;
                        const int iy0 = oy * stride - padding;
                        const int ix0 = ox * stride - padding;
                        for (int ic = 0; ic < cin; ++ic) {
                            for (int ky = 0; ky < k; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < k; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix < 0 || ix >= ww) continue;
                                    const std::size_t xi = (static_cast<std::size_t>(ic) * h + iy) * ww + ix;
                                    const std::size_t wi = ((static_cast<std::size_t>(oc) * cin + ic) * k + ky) * k + kx;
                                    if (gx) gx->data[xi] += g * wv.data[wi];
                                    if (gw) gw->data[wi] += g * xv.data[xi];
                                }
                            }
                        }
                    }
                }
            }
        };
        return id;
    }

    NodeId affine(NodeId x, NodeId w, NodeId b) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const auto& bv = val(b);
        TensorT<T> out = oar::affine(xv, wv, bv.data);
        NodeId id = push(std::move(out), any_grad({x, w, b}), nullptr, {x, w, b});
        node(id).backward = [this, id, x, w, b]() {
            const auto& xv = val(x);
            const auto& wv = val(w);
            const auto& gy = node(id).grad;
            const int dout = wv.dim(0), din = wv.dim(1);
            TensorT<T>* gx = grad_buf(x);
            TensorT<T>* gw = grad_buf(w);
            TensorT<T>* gb = grad_buf(b);
            for (int i = 0; i < dout; ++i) {
                const T g = gy.data[static_cast<std::size_t>(i)];
                if (g == T(0)) continue;
                if (gb) gb->data[static_cast<std::size_t>(i)] += g;
                for (int j = 0; j < din; ++j) {
                    const std::size_t wi = static_cast<std::size_t>(i) * din + j;
                    if (gx) gx->data[static_cast<std::size_t>(j)] += g * wv.data[wi];
                    if (gw) gw->data[wi] += g * xv.data[static_cast<std::size_t>(j)];
                }
            }
        };
        return id;
    }

    NodeId sigmoid(NodeId x) {
        TensorT<T> out = apply_activation(Activation::Sigmoid, val(x));
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x]() {
            const auto& y = node(id).val;
            const auto& gy = node(id).grad;
            TensorT<T>* gx = grad_buf(x);
            if (!gx) return;
            for (std::size_t i = 0; i < y.size(); ++i) {
                gx->data[i] += gy.data[i] * y.data[i] * (T(1) - y.data[i]);
            }
        };
        return id;
    }

    NodeId relu(NodeId x) {
        TensorT<T> out = apply_activation(Activation::Relu, val(x));
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x]() {
            const auto& xv = val(x);
            const auto& gy = node(id).grad;
            TensorT<T>* gx = grad_buf(x);
            if (!gx) return;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                if (xv.data[i] > T(0)) gx->data[i] += gy.data[i];
            }
        };
        return id;
    }

    NodeId softmax(NodeId x) {
        TensorT<T> out = apply_activation(Activation::Softmax, val(x));
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x]() {
            const auto& p = node(id).val;
            const auto& gy = node(id).grad;
            TensorT<T>* gx = grad_buf(x);
            if (!gx) return;
            T dot = T(0);
            for (std::size_t i = 0; i < p.size(); ++i) dot += p.data[i] * gy.data[i];
            for (std::size_t i = 0; i < p.size(); ++i) {
                gx->data[i] += p.data[i] * (gy.data[i] - dot);
            }
        };
        return id;
    }

    NodeId pool(PoolKind kind, NodeId x, int window, int stride, bool same_padding) {
        const auto& xv = val(x);
        TensorT<T> out = pool2d(kind, xv, window, stride, same_padding);
        const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
        const int oh = out.dim(1), ow = out.dim(2);
        const int pad = same_padding ? (window - 1) / 2 : 0;
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x, kind, window, stride, pad, c, h, w, oh, ow]() {
            const auto& xv = val(x);
            const auto& gy = node(id).grad;
            TensorT<T>* gx = grad_buf(x);
            if (!gx) return;
            for (int ic = 0; ic < c; ++ic) {
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const T g = gy.data[(static_cast<std::size_t>(ic) * oh + oy) * ow + ox];
                        if (g == T(0)) continue;
                        const int iy0 = oy * stride - pad;
                        const int ix0 = ox * stride - pad;
                        if (kind == PoolKind::Max) {
                            T best = -std::numeric_limits<T>::infinity();
                            std::size_t best_i = 0;
                            for (int ky = 0; ky < window; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < window; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix < 0 || ix >= w) continue;
                                    const std::size_t xi = (static_cast<std::size_t>(ic) * h + iy) * w + ix;
                                    if (xv.data[xi] > best) {
                                        best = xv.data[xi];
                                        best_i = xi;
                                    }
                                }
                            }
                            gx->data[best_i] += g;
                        } else {
                            int count = 0;
                            for (int ky = 0; ky < window; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < window; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix >= 0 && ix < w) ++count;
                                }
                            }
                            const T share = g / static_cast<T>(count);
                            for (int ky = 0; ky < window; ++ky) {
                                const int iy = iy0 + ky;
                                if (iy < 0 || iy >= h) continue;
                                for (int kx = 0; kx < window; ++kx) {
                                    const int ix = ix0 + kx;
                                    if (ix < 0 || ix >= w) continue;
                                    gx->data[(static_cast<std::size_t>(ic) * h + iy) * w + ix] += share;
                                }
                            }
                        }
                    }
                }
            }
        };
        return id;
    }

    NodeId global_avg(NodeId x) {
        const auto& xv = val(x);
        TensorT<T> out = oar::global_avg(xv);
        const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x, hw]() {
            const auto& gy = node(id).grad;
            TensorT<T>* gx = grad_buf(x);
            if (!gx) return;
            const int c = static_cast<int>(gy.size());
            for (int ic = 0; ic < c; ++ic) {
                const T share = gy.data[static_cast<std::size_t>(ic)] / static_cast<T>(hw);
                T* dst = gx->data.data() + static_cast<std::size_t>(ic) * hw;
                for (std::size_t i = 0; i < hw; ++i) dst[i] += share;
            }
        };
        return id;
    }

    // Channel concat of C_i×H×W inputs.
    NodeId concat_channels(const std::vector<NodeId>& xs) {
        if (xs.empty()) throw ShapeError("concat_channels needs at least one input");
        const int h = val(xs[0]).dim(1), w = val(xs[0]).dim(2);
        int ctot = 0;
        for (NodeId x : xs) {
            const auto& v = val(x);
            if (v.rank() != 3 || v.dim(1) != h || v.dim(2) != w) {
                throw ShapeError("concat_channels spatial mismatch: " + shape_str(v.shape));
            }
            ctot += v.dim(0);
        }
        TensorT<T> out({ctot, h, w});
        std::size_t off = 0;
        for (NodeId x : xs) {
            const auto& v = val(x);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += v.size();
        }
        NodeId id = push(std::move(out), any_grad(xs), nullptr, xs);
        node(id).backward = [this, id, xs]() {
            const auto& gy = node(id).grad;
            std::size_t off = 0;
            for (NodeId x : xs) {
                const std::size_t n = val(x).size();
                if (TensorT<T>* gx = grad_buf(x)) {
                    for (std::size_t i = 0; i < n; ++i) gx->data[i] += gy.data[off + i];
                }
                off += n;
            }
        };
        return id;
    }

    NodeId add(NodeId a, NodeId b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (!av.same_shape(bv)) {
            throw ShapeError("add shape mismatch: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
        }
        TensorT<T> out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
        NodeId id = push(std::move(out), any_grad({a, b}), nullptr, {a, b});
        node(id).backward = [this, id, a, b]() {
            const auto& gy = node(id).grad;
            if (TensorT<T>* ga = grad_buf(a)) {
                for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i];
            }
            if (TensorT<T>* gb = grad_buf(b)) {
                for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] += gy.data[i];
            }
        };
        return id;
    }

    NodeId mul(NodeId a, NodeId b) {
        const auto& av = val(a);
        const auto& bv = val(b);
        if (!av.same_shape(bv)) {
            throw ShapeError("mul shape mismatch: " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
        }
        TensorT<T> out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
        NodeId id = push(std::move(out), any_grad({a, b}), nullptr, {a, b});
        node(id).backward = [this, id, a, b]() {
            const auto& gy = node(id).grad;
            const auto& av = val(a);
            const auto& bv = val(b);
            if (TensorT<T>* ga = grad_buf(a)) {
                for (std::size_t i = 0; i < gy.size(); ++i) ga->data[i] += gy.data[i] * bv.data[i];
            }
            if (TensorT<T>* gb = grad_buf(b)) {
                for (std::size_t i = 0; i < gy.size(); ++i) gb->data[i] += gy.data[i] * av.data[i];
            }
        };
        return id;
    }

    // x: C×H×W multiplied by a broadcast 1×H×W plane.
    NodeId broadcast_mul_plane(NodeId x, NodeId plane) {
        const auto& xv = val(x);
        const auto& pv = val(plane);
        if (pv.rank() != 3 || pv.dim(0) != 1 || pv.dim(1) != xv.dim(1) || pv.dim(2) != xv.dim(2)) {
            throw ShapeError("broadcast plane " + shape_str(pv.shape) + " vs features " + shape_str(xv.shape));
        }
        const int c = xv.dim(0);
        const std::size_t hw = pv.size();
        TensorT<T> out = xv;
        for (int ic = 0; ic < c; ++ic) {
            T* row = out.data.data() + static_cast<std::size_t>(ic) * hw;
            for (std::size_t i = 0; i < hw; ++i) row[i] *= pv.data[i];
        }
        NodeId id = push(std::move(out), any_grad({x, plane}), nullptr, {x, plane});
        node(id).backward = [this, id, x, plane, c, hw]() {
            const auto& gy = node(id).grad;
            const auto& xv = val(x);
            const auto& pv = val(plane);
            TensorT<T>* gx = grad_buf(x);
            TensorT<T>* gp = grad_buf(plane);
            for (int ic = 0; ic < c; ++ic) {
                const std::size_t base = static_cast<std::size_t>(ic) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    if (gx) gx->data[base + i] += gy.data[base + i] * pv.data[i];
                    if (gp) gp->data[i] += gy.data[base + i] * xv.data[base + i];
                }
            }
        };
        return id;
    }

    NodeId scale(NodeId x, T s) {
        TensorT<T> out = val(x);
        for (T& v : out.data) v *= s;
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x, s]() {
            const auto& gy = node(id).grad;
            if (TensorT<T>* gx = grad_buf(x)) {
                for (std::size_t i = 0; i < gy.size(); ++i) gx->data[i] += gy.data[i] * s;
            }
        };
        return id;
    }

    NodeId flatten(NodeId x) {
        TensorT<T> out = val(x);
        out.shape = {static_cast<int>(out.size())};
        NodeId id = push(std::move(out), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x]() {
            const auto& gy = node(id).grad;
            if (TensorT<T>* gx = grad_buf(x)) {
                for (std::size_t i = 0; i < gy.size(); ++i) gx->data[i] += gy.data[i];
            }
        };
        return id;
    }

    // Concat of flat vectors.
    NodeId concat_vec(const std::vector<NodeId>& xs) {
        int total = 0;
        for (NodeId x : xs) {
            if (val(x).rank() != 1) throw ShapeError("concat_vec expects flat vectors");
            total += static_cast<int>(val(x).size());
        }
        TensorT<T> out({total});
        std::size_t off = 0;
        for (NodeId x : xs) {
            const auto& v = val(x);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += v.size();
        }
        NodeId id = push(std::move(out), any_grad(xs), nullptr, xs);
        node(id).backward = [this, id, xs]() {
            const auto& gy = node(id).grad;
            std::size_t off = 0;
            for (NodeId x : xs) {
                const std::size_t n = val(x).size();
                if (TensorT<T>* gx = grad_buf(x)) {
                    for (std::size_t i = 0; i < n; ++i) gx->data[i] += gy.data[off + i];
                }
                off += n;
            }
        };
        return id;
    }

    // Forward takes `replaced` wholesale (its channels [c, C) must equal x's);
    // backward routes only channels [c, C) to x. Used by the temporal shift,
    // whose swapped-in history slices are constants.
    NodeId replace_leading_channels(NodeId x, TensorT<T> replaced, int c) {
        const auto& xv = val(x);
        if (xv.rank() != 3 || replaced.shape != xv.shape) {
            throw ShapeError("replace_leading_channels shape mismatch: " + shape_str(replaced.shape) +
                             " vs " + shape_str(xv.shape));
        }
        const std::size_t hw = static_cast<std::size_t>(xv.dim(1)) * xv.dim(2);
        NodeId id = push(std::move(replaced), any_grad({x}), nullptr, {x});
        node(id).backward = [this, id, x, c, hw]() {
            const auto& gy = node(id).grad;
            if (TensorT<T>* gx = grad_buf(x)) {
                const std::size_t start = static_cast<std::size_t>(c) * hw;
                for (std::size_t i = start; i < gy.size(); ++i) gx->data[i] += gy.data[i];
            }
        };
        return id;
    }

    // Numerically stable fused softmax + negative log likelihood.
    NodeId softmax_cross_entropy(NodeId logits, int label) {
        const auto& z = val(logits);
        if (z.rank() != 1 || label < 0 || label >= static_cast<int>(z.size())) {
            throw ShapeError("softmax_cross_entropy: bad logits/label");
        }
        const T mx = *std::max_element(z.data.begin(), z.data.end());
        T sum = T(0);
        for (T v : z.data) sum += std::exp(v - mx);
        const T logsum = std::log(sum) + mx;
        TensorT<T> out({1});
        out.data[0] = logsum - z.data[static_cast<std::size_t>(label)];
        NodeId id = push(std::move(out), any_grad({logits}), nullptr, {logits});
        node(id).backward = [this, id, logits, label, mx, sum]() {
            const auto& z = val(logits);
            const T g = node(id).grad.data[0];
            if (TensorT<T>* gx = grad_buf(logits)) {
                for (std::size_t i = 0; i < z.size(); ++i) {
                    T p = std::exp(z.data[i] - mx) / sum;
                    gx->data[i] += g * (p - (static_cast<int>(i) == label ? T(1) : T(0)));
                }
            }
        };
        return id;
    }

    // Stable binary cross-entropy on a single logit.
    NodeId bce_with_logit(NodeId logit, T target) {
        const auto& z = val(logit);
        if (z.size() != 1) throw ShapeError("bce_with_logit expects a scalar logit");
        const T zv = z.data[0];
        // log(1+e^z) - y*z, computed stably.
        const T softplus = zv > T(0) ? zv + std::log1p(std::exp(-zv)) : std::log1p(std::exp(zv));
        TensorT<T> out({1});
        out.data[0] = softplus - target * zv;
        NodeId id = push(std::move(out), any_grad({logit}), nullptr, {logit});
        node(id).backward = [this, id, logit, target]() {
            const T zv = val(logit).data[0];
            const T g = node(id).grad.data[0];
            if (TensorT<T>* gx = grad_buf(logit)) {
                gx->data[0] += g * (stable_sigmoid(zv) - target);
            }
        };
        return id;
    }

    // Seeds d(loss)/d(loss) = seed. When into_params is set the result lands
    // in Param::grad; otherwise read it back via for_each_param_grad (used by
    // batched training so per-sample grads can be reduced in sample order).
    void backward(NodeId loss, T seed = T(1), bool into_params = true) {
        auto& ln = node(loss);
        if (ln.val.size() != 1) throw ShapeError("backward requires a scalar loss node");
        for (auto& n : nodes_) {
            if (n.needs_grad) {
                n.grad = TensorT<T>(n.val.shape);
            }
        }
        if (!ln.needs_grad) return;  // loss does not depend on any parameter
        ln.grad.data[0] = seed;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->needs_grad && it->backward) it->backward();
        }
        if (!into_params) return;
        for (auto& n : nodes_) {
            if (n.param_target) {
                for (std::size_t i = 0; i < n.grad.size(); ++i) {
                    n.param_target->grad.data[i] += n.grad.data[i];
                }
            }
        }
    }

    // One call per param NODE (a param used twice yields two calls).
    void for_each_param_grad(const std::function<void(Param<T>*, const TensorT<T>&)>& fn) const {
        for (const auto& n : nodes_) {
            if (n.param_target && n.needs_grad) fn(n.param_target, n.grad);
        }
    }

private:
    struct Node {
        TensorT<T> val;
        TensorT<T> grad;
        bool needs_grad = false;
        Param<T>* param_target = nullptr;
        std::function<void()> backward;
    };

    Node& node(NodeId id) { return nodes_[static_cast<std::size_t>(id)]; }
    const TensorT<T>& val(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].val; }

    // Grad buffer if the node participates in backprop, else nullptr.
    TensorT<T>* grad_buf(NodeId id) {
        Node& n = node(id);
        return n.needs_grad ? &n.grad : nullptr;
    }

    bool any_grad(const std::vector<NodeId>& ids) const {
        for (NodeId id : ids) {
            if (nodes_[static_cast<std::size_t>(id)].needs_grad) return true;
        }
        return false;
    }

    NodeId push(TensorT<T> v, bool needs_grad, Param<T>* target, std::vector<NodeId>) {
        Node n;
        n.val = std::move(v);
        n.needs_grad = needs_grad;
        n.param_target = target;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace oar
