#include "toposeg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace toposeg {

namespace {

void require(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

void require_graph(const Var& v) {
    require(v.valid(), "operation on a default-constructed Var");
}

void require_same_graph(const Var& a, const Var& b) {
    require_graph(a);
    require(a.graph() == b.graph(), "operands belong to different graphs");
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

} // namespace

const Tensor& Var::value() const { return g_->value(id_); }

const std::vector<int>& Var::shape() const { return g_->value(id_).shape(); }

Tensor Gradients::at(const Var& v) const {
    const size_t id = static_cast<size_t>(v.id());
    if (id < has_.size() && has_[id]) return grads_[id];
    return Tensor::zeros(v.value().shape());
}

const Tensor* Gradients::find(const Var& v) const {
    const size_t id = static_cast<size_t>(v.id());
    return (id < has_.size() && has_[id]) ? &grads_[id] : nullptr;
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::add_op(Tensor value, std::vector<int> parents, BackwardFn fn) {
    bool rg = false;
    for (int p : parents) {
        if (p < 0 || p >= size()) throw std::logic_error("graph: parent id out of range");
        rg = rg || nodes_[static_cast<size_t>(p)].requires_grad;
    }
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    if (rg) n.backward = std::move(fn);
    n.requires_grad = rg;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::add_barrier(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Gradients Graph::backward(const Var& loss) {
    if (loss.graph() != this) throw std::invalid_argument("backward: loss from another graph");
    if (value(loss.id()).numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    Gradients gs;
    gs.grads_.resize(nodes_.size());
    gs.has_.assign(nodes_.size(), false);
    gs.grads_[static_cast<size_t>(loss.id())] = Tensor::full(value(loss.id()).shape(), 1.0);
    gs.has_[static_cast<size_t>(loss.id())] = true;
    // Node ids are a topological order, so descending ids are a reverse one.
    for (int id = loss.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!gs.has_[static_cast<size_t>(id)] || !n.backward) continue;
        n.backward(*this, id, gs.grads_[static_cast<size_t>(id)], gs);
    }
    return gs;
}

void Graph::accumulate(Gradients& gs, int id, const Tensor& t, double scale) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (t.numel() != n.value.numel()) throw std::logic_error("graph: gradient shape mismatch");
    if (!gs.has_[static_cast<size_t>(id)]) {
        gs.grads_[static_cast<size_t>(id)] = Tensor::zeros(n.value.shape());
        gs.has_[static_cast<size_t>(id)] = true;
    }
    Tensor& acc = gs.grads_[static_cast<size_t>(id)];
    for (int64_t i = 0; i < t.numel(); ++i) acc[i] += scale * t[i];
}

Var add(Var a, Var b) {
    require_same_graph(a, b);
    Graph& g = *a.graph();
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.same_shape(bv), "add: shape mismatch");
    Tensor out(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
    const int pa = a.id(), pb = b.id();
    return g.add_op(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int, const Tensor& og, Gradients& gs) {
        gr.accumulate(gs, pa, og);
        gr.accumulate(gs, pb, og);
    });
}

Var sub(Var a, Var b) {
    require_same_graph(a, b);
    Graph& g = *a.graph();
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.same_shape(bv), "sub: shape mismatch");
    Tensor out(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] - bv[i];
    const int pa = a.id(), pb = b.id();
    return g.add_op(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int, const Tensor& og, Gradients& gs) {
        gr.accumulate(gs, pa, og);
        gr.accumulate(gs, pb, og, -1.0);
    });
}

Var mul(Var a, Var b) {
    require_same_graph(a, b);
    Graph& g = *a.graph();
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require(av.same_shape(bv), "mul: shape mismatch");
    Tensor out = hadamard(av, bv);
    const int pa = a.id(), pb = b.id();
    return g.add_op(std::move(out), {pa, pb}, [pa, pb](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (gr.requires_grad(pa)) gr.accumulate(gs, pa, hadamard(og, gr.value(pb)));
        if (gr.requires_grad(pb)) gr.accumulate(gs, pb, hadamard(og, gr.value(pa)));
    });
}

Var scale(Var x, double c) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] * c;
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px, c](Graph& gr, int, const Tensor& og, Gradients& gs) {
        gr.accumulate(gs, px, og, c);
    });
}

Var add_scalar(Var x, double c) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] + c;
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px](Graph& gr, int, const Tensor& og, Gradients& gs) {
        gr.accumulate(gs, px, og);
    });
}

Var relu(Var x) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& xv2 = gr.value(px);
        Tensor t(og.shape());
        for (int64_t i = 0; i < og.numel(); ++i) t[i] = xv2[i] > 0.0 ? og[i] : 0.0;
        gr.accumulate(gs, px, t);
    });
}

Var sqrt(Var x) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) {
        require(xv[i] >= 0.0, "sqrt: negative input");
        out[i] = std::sqrt(xv[i]);
    }
    const int px = x.id();
    // subgradient 0 at the origin; callers clamp away from it anyway
    return g.add_op(std::move(out), {px}, [px](Graph& gr, int self, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& ov = gr.value(self);
        Tensor t(og.shape());
        for (int64_t i = 0; i < og.numel(); ++i) t[i] = ov[i] > 0.0 ? og[i] * 0.5 / ov[i] : 0.0;
        gr.accumulate(gs, px, t);
    });
}

Var reciprocal(Var x) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) {
        require(xv[i] != 0.0, "reciprocal: division by zero");
        out[i] = 1.0 / xv[i];
    }
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px](Graph& gr, int self, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& ov = gr.value(self);
        Tensor t(og.shape());
        for (int64_t i = 0; i < og.numel(); ++i) t[i] = -og[i] * ov[i] * ov[i];
        gr.accumulate(gs, px, t);
    });
}

Var clamp_min(Var x, double floor) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > floor ? xv[i] : floor;
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px, floor](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& xv2 = gr.value(px);
        Tensor t(og.shape());
        for (int64_t i = 0; i < og.numel(); ++i) t[i] = xv2[i] > floor ? og[i] : 0.0;
        gr.accumulate(gs, px, t);
    });
}

Var log_clamped(Var x, double floor) {
    require_graph(x);
    require(floor > 0.0, "log_clamped: floor must be positive");
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) out[i] = std::log(xv[i] > floor ? xv[i] : floor);
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px, floor](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& xv2 = gr.value(px);
        Tensor t(og.shape());
        for (int64_t i = 0; i < og.numel(); ++i) t[i] = xv2[i] > floor ? og[i] / xv2[i] : 0.0;
        gr.accumulate(gs, px, t);
    });
}

namespace {

// stride tables for reduce_sum: out_stride is 0 on summed axes, so the
// output index of any input element is a single fused dot product
struct SumMap {
    std::vector<int> ext;
    std::vector<int64_t> in_stride;
    std::vector<int64_t> out_stride;

    int64_t out_index(int64_t flat) const {
        int64_t o = 0;
        for (size_t i = 0; i < ext.size(); ++i) o += ((flat / in_stride[i]) % ext[i]) * out_stride[i];
        return o;
    }
};

} // namespace

Var reduce_sum(Var x, std::vector<int> axes) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    const int nd = xv.ndim();
    if (axes.empty()) {
        axes.resize(static_cast<size_t>(nd));
        for (int i = 0; i < nd; ++i) axes[static_cast<size_t>(i)] = i;
    }
    std::vector<char> summed(static_cast<size_t>(nd), 0);
    for (int a : axes) {
        require(a >= 0 && a < nd, "reduce_sum: axis out of range");
        require(!summed[static_cast<size_t>(a)], "reduce_sum: duplicate axis");
        summed[static_cast<size_t>(a)] = 1;
    }
    std::vector<int> out_shape;
    for (int i = 0; i < nd; ++i)
        if (!summed[static_cast<size_t>(i)]) out_shape.push_back(xv.extent(i));

    SumMap map;
    map.ext.resize(static_cast<size_t>(nd));
    map.in_stride.resize(static_cast<size_t>(nd));
    map.out_stride.resize(static_cast<size_t>(nd));
    int64_t is = 1;
    for (int i = nd - 1; i >= 0; --i) {
        map.ext[static_cast<size_t>(i)] = xv.extent(i);
        map.in_stride[static_cast<size_t>(i)] = is;
        is *= xv.extent(i);
    }
    int64_t os = 1;
    for (int i = nd - 1; i >= 0; --i) {
        if (summed[static_cast<size_t>(i)]) {
            map.out_stride[static_cast<size_t>(i)] = 0;
        } else {
            map.out_stride[static_cast<size_t>(i)] = os;
            os *= xv.extent(i);
        }
    }

    Tensor out = Tensor::zeros(out_shape);
    for (int64_t i = 0; i < xv.numel(); ++i) out[map.out_index(i)] += xv[i];

    const int px = x.id();
    std::vector<int> in_shape = xv.shape();
    return g.add_op(std::move(out), {px},
                    [px, map, in_shape](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        if (!gr.requires_grad(px)) return;
                        Tensor t(in_shape);
                        for (int64_t i = 0; i < t.numel(); ++i) t[i] = og[map.out_index(i)];
                        gr.accumulate(gs, px, t);
                    });
}

Var reshape(Var x, std::vector<int> shape) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    require(shape_numel(shape) == xv.numel(), "reshape: element count mismatch");
    Tensor out(std::move(shape), std::vector<double>(xv.data(), xv.data() + xv.numel()));
    const int px = x.id();
    std::vector<int> in_shape = xv.shape();
    return g.add_op(std::move(out), {px}, [px, in_shape](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        gr.accumulate(gs, px, Tensor(in_shape, std::vector<double>(og.data(), og.data() + og.numel())));
    });
}

Var concat(const std::vector<Var>& xs, int axis) {
    require(!xs.empty(), "concat: needs at least one input");
    require_graph(xs[0]);
    Graph& g = *xs[0].graph();
    const std::vector<int>& s0 = xs[0].value().shape();
    const int nd = static_cast<int>(s0.size());
    require(axis >= 0 && axis < nd, "concat: axis out of range");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= s0[static_cast<size_t>(i)];

    std::vector<int> parents;
    std::vector<int> extents;
    int total = 0;
    for (const Var& v : xs) {
        require_same_graph(xs[0], v);
        const std::vector<int>& s = v.value().shape();
        require(static_cast<int>(s.size()) == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            require(i == axis || s[static_cast<size_t>(i)] == s0[static_cast<size_t>(i)], "concat: extent mismatch");
        parents.push_back(v.id());
        extents.push_back(s[static_cast<size_t>(axis)]);
        total += s[static_cast<size_t>(axis)];
    }
    std::vector<int> out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = total;
    Tensor out(out_shape);
    double* dst = out.data();
    for (int64_t o = 0; o < outer; ++o) {
        int64_t off = 0;
        for (size_t j = 0; j < xs.size(); ++j) {
            const int64_t block = static_cast<int64_t>(extents[j]) * inner;
            const double* src = xs[j].value().data() + o * block;
            std::copy(src, src + block, dst + o * (static_cast<int64_t>(total) * inner) + off);
            off += block;
        }
    }
    return g.add_op(std::move(out), std::vector<int>(parents),
                    [parents, extents, outer, inner, total](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        int64_t off = 0;
                        for (size_t j = 0; j < parents.size(); ++j) {
                            const int64_t block = static_cast<int64_t>(extents[j]) * inner;
                            if (gr.requires_grad(parents[j])) {
                                Tensor t(gr.value(parents[j]).shape());
                                for (int64_t o = 0; o < outer; ++o) {
                                    const double* src = og.data() + o * (static_cast<int64_t>(total) * inner) + off;
                                    std::copy(src, src + block, t.data() + o * block);
                                }
                                gr.accumulate(gs, parents[j], t);
                            }
                            off += block;
                        }
                    });
}

Var row_scale(Var x, Var r) {
    require_same_graph(x, r);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    const Tensor& rv = r.value();
    require(xv.ndim() == 2 && rv.ndim() == 1 && rv.extent(0) == xv.extent(0), "row_scale: expected [R,C] and [R]");
    const int R = xv.extent(0), C = xv.extent(1);
    Tensor out({R, C});
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < C; ++j) out.at2(i, j) = xv.at2(i, j) * rv[i];
    const int px = x.id(), pr = r.id();
    return g.add_op(std::move(out), {px, pr}, [px, pr, R, C](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (gr.requires_grad(px)) {
            const Tensor& rv2 = gr.value(pr);
            Tensor t({R, C});
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) t.at2(i, j) = og.at2(i, j) * rv2[i];
            gr.accumulate(gs, px, t);
        }
        if (gr.requires_grad(pr)) {
            const Tensor& xv2 = gr.value(px);
            Tensor t({R});
            for (int i = 0; i < R; ++i) {
                double s = 0.0;
                for (int j = 0; j < C; ++j) s += og.at2(i, j) * xv2.at2(i, j);
                t[i] = s;
            }
            gr.accumulate(gs, pr, t);
        }
    });
}

Var broadcast_spatial(Var v, int h, int w) {
    require_graph(v);
    require(h > 0 && w > 0, "broadcast_spatial: target size must be positive");
    Graph& g = *v.graph();
    const Tensor& vv = v.value();
    require(vv.ndim() == 2, "broadcast_spatial: expected a [B,D] tensor");
    const int B = vv.extent(0), D = vv.extent(1);
    Tensor out({B, D, h, w});
    double* dst = out.data();
    const int64_t plane = static_cast<int64_t>(h) * w;
    for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d) {
            const double val = vv.at2(b, d);
            double* p = dst + (static_cast<int64_t>(b) * D + d) * plane;
            std::fill(p, p + plane, val);
        }
    const int pv = v.id();
    return g.add_op(std::move(out), {pv}, [pv, B, D, plane](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(pv)) return;
        Tensor t({B, D});
        for (int b = 0; b < B; ++b)
            for (int d = 0; d < D; ++d) {
                const double* p = og.data() + (static_cast<int64_t>(b) * D + d) * plane;
                double s = 0.0;
                for (int64_t i = 0; i < plane; ++i) s += p[i];
                t.at2(b, d) = s;
            }
        gr.accumulate(gs, pv, t);
    });
}

Var gather_pixels(Var m, std::vector<PixelIndex> sites) {
    require_graph(m);
    Graph& g = *m.graph();
    const Tensor& mv = m.value();
    require(mv.ndim() == 4, "gather_pixels: expected a [B,D,H,W] tensor");
    const int B = mv.extent(0), D = mv.extent(1), H = mv.extent(2), W = mv.extent(3);
    for (const PixelIndex& s : sites)
        require(s.b >= 0 && s.b < B && s.y >= 0 && s.y < H && s.x >= 0 && s.x < W, "gather_pixels: site out of bounds");
    const int P = static_cast<int>(sites.size());
    Tensor out({P, D});
    for (int p = 0; p < P; ++p)
        for (int d = 0; d < D; ++d) out.at2(p, d) = mv.at4(sites[static_cast<size_t>(p)].b, d, sites[static_cast<size_t>(p)].y, sites[static_cast<size_t>(p)].x);
    const int pm = m.id();
    std::vector<int> in_shape = mv.shape();
    return g.add_op(std::move(out), {pm},
                    [pm, sites = std::move(sites), in_shape, D](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        if (!gr.requires_grad(pm)) return;
                        Tensor t = Tensor::zeros(in_shape);
                        for (size_t p = 0; p < sites.size(); ++p)
                            for (int d = 0; d < D; ++d)
                                t.at4(sites[p].b, d, sites[p].y, sites[p].x) += og.at2(static_cast<int>(p), d);
                        gr.accumulate(gs, pm, t);
                    });
}

namespace {

Var linear_impl(Var x, Var w, const Var* bias) {
    require_same_graph(x, w);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require(xv.ndim() == 2 && wv.ndim() == 2, "linear: expected [N,Din] and [Din,Dout]");
    const int N = xv.extent(0), Din = xv.extent(1), Dout = wv.extent(1);
    require(wv.extent(0) == Din, "linear: weight rows must match input features");
    if (bias) {
        require_same_graph(x, *bias);
        require(bias->value().ndim() == 1 && bias->value().extent(0) == Dout, "linear: bias extent mismatch");
    }
    Tensor out({N, Dout});
    double* od = out.data();
    const double* xd = xv.data();
    const double* wd = wv.data();
    for (int n = 0; n < N; ++n) {
        double* orow = od + static_cast<int64_t>(n) * Dout;
        if (bias) {
            const double* bd = bias->value().data();
            std::copy(bd, bd + Dout, orow);
        }
        const double* xrow = xd + static_cast<int64_t>(n) * Din;
        for (int d = 0; d < Din; ++d) {
            const double xval = xrow[d];
            const double* wrow = wd + static_cast<int64_t>(d) * Dout;
            for (int o = 0; o < Dout; ++o) orow[o] += xval * wrow[o];
        }
    }
    const int px = x.id(), pw = w.id();
    const int pb = bias ? bias->id() : -1;
    std::vector<int> parents = {px, pw};
    if (bias) parents.push_back(pb);
    return g.add_op(std::move(out), std::move(parents),
                    [px, pw, pb, N, Din, Dout](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        const double* gd = og.data();
                        if (gr.requires_grad(px)) {
                            const double* wd2 = gr.value(pw).data();
                            Tensor gx({N, Din});
                            for (int n = 0; n < N; ++n) {
                                const double* grow = gd + static_cast<int64_t>(n) * Dout;
                                for (int d = 0; d < Din; ++d) {
                                    const double* wrow = wd2 + static_cast<int64_t>(d) * Dout;
                                    double s = 0.0;
                                    for (int o = 0; o < Dout; ++o) s += grow[o] * wrow[o];
                                    gx.at2(n, d) = s;
                                }
                            }
                            gr.accumulate(gs, px, gx);
                        }
                        if (gr.requires_grad(pw)) {
                            const double* xd2 = gr.value(px).data();
                            Tensor gw = Tensor::zeros({Din, Dout});
                            for (int n = 0; n < N; ++n) {
                                const double* grow = gd + static_cast<int64_t>(n) * Dout;
                                const double* xrow = xd2 + static_cast<int64_t>(n) * Din;
                                for (int d = 0; d < Din; ++d) {
                                    const double xval = xrow[d];
                                    double* gwrow = gw.data() + static_cast<int64_t>(d) * Dout;
                                    for (int o = 0; o < Dout; ++o) gwrow[o] += xval * grow[o];
                                }
                            }
                            gr.accumulate(gs, pw, gw);
                        }
                        if (pb >= 0 && gr.requires_grad(pb)) {
                            Tensor gb = Tensor::zeros({Dout});
                            for (int n = 0; n < N; ++n) {
                                const double* grow = gd + static_cast<int64_t>(n) * Dout;
                                for (int o = 0; o < Dout; ++o) gb[o] += grow[o];
                            }
                            gr.accumulate(gs, pb, gb);
                        }
                    });
}

} // namespace

Var linear(Var x, Var w) { return linear_impl(x, w, nullptr); }

Var linear(Var x, Var w, Var bias) { return linear_impl(x, w, &bias); }

Var conv2d(Var x, Var w, Var bias) {
    require_same_graph(x, w);
    require_same_graph(x, bias);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = bias.value();
    require(xv.ndim() == 4 && wv.ndim() == 4, "conv2d: expected [B,Cin,H,W] input and [Cout,Cin,kh,kw] weights");
    const int B = xv.extent(0), Cin = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    const int Cout = wv.extent(0), kh = wv.extent(2), kw = wv.extent(3);
    require(wv.extent(1) == Cin, "conv2d: channel mismatch");
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel extents must be odd");
    require(bv.ndim() == 1 && bv.extent(0) == Cout, "conv2d: bias extent mismatch");
    const int ph = kh / 2, pw2 = kw / 2;
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out({B, Cout, H, W});
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < Cout; ++o) {
            double* oplane = out.data() + (static_cast<int64_t>(b) * Cout + o) * plane;
            std::fill(oplane, oplane + plane, bv[o]);
            for (int c = 0; c < Cin; ++c) {
                const double* xplane = xv.data() + (static_cast<int64_t>(b) * Cin + c) * plane;
                for (int dy = 0; dy < kh; ++dy)
                    for (int dx = 0; dx < kw; ++dx) {
                        const double wt = wv.at4(o, c, dy, dx);
                        const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                        const int x0 = std::max(0, pw2 - dx), x1 = std::min(W, W + pw2 - dx);
                        const int n = x1 - x0;
                        for (int y = y0; y < y1; ++y) {
                            const double* xrow = xplane + static_cast<int64_t>(y + dy - ph) * W + (x0 + dx - pw2);
                            double* orow = oplane + static_cast<int64_t>(y) * W + x0;
                            for (int i = 0; i < n; ++i) orow[i] += wt * xrow[i];
                        }
                    }
            }
        }

    const int px = x.id(), pwid = w.id(), pb = bias.id();
    return g.add_op(std::move(out), {px, pwid, pb},
                    [px, pwid, pb, B, Cin, Cout, H, W, kh, kw, ph, pw2, plane](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        const bool need_gx = gr.requires_grad(px);
                        const bool need_gw = gr.requires_grad(pwid);
                        const bool need_gb = gr.requires_grad(pb);
                        const Tensor& xv2 = gr.value(px);
                        const Tensor& wv2 = gr.value(pwid);
                        Tensor gx = need_gx ? Tensor::zeros({B, Cin, H, W}) : Tensor();
                        Tensor gw = need_gw ? Tensor::zeros({Cout, Cin, kh, kw}) : Tensor();
                        Tensor gb = need_gb ? Tensor::zeros({Cout}) : Tensor();
                        for (int b = 0; b < B; ++b)
                            for (int o = 0; o < Cout; ++o) {
                                const double* gplane = og.data() + (static_cast<int64_t>(b) * Cout + o) * plane;
                                if (need_gb) {
                                    double s = 0.0;
                                    for (int64_t i = 0; i < plane; ++i) s += gplane[i];
                                    gb[o] += s;
                                }
                                if (!need_gx && !need_gw) continue;
                                for (int c = 0; c < Cin; ++c) {
                                    const double* xplane = xv2.data() + (static_cast<int64_t>(b) * Cin + c) * plane;
                                    double* gxplane = need_gx ? gx.data() + (static_cast<int64_t>(b) * Cin + c) * plane : nullptr;
                                    for (int dy = 0; dy < kh; ++dy)
                                        for (int dx = 0; dx < kw; ++dx) {
                                            const double wt = wv2.at4(o, c, dy, dx);
                                            const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                                            const int x0 = std::max(0, pw2 - dx), x1 = std::min(W, W + pw2 - dx);
                                            const int n = x1 - x0;
                                            double acc = 0.0;
                                            for (int y = y0; y < y1; ++y) {
                                                const double* grow = gplane + static_cast<int64_t>(y) * W + x0;
                                                const int64_t src = static_cast<int64_t>(y + dy - ph) * W + (x0 + dx - pw2);
                                                if (need_gx) {
                                                    double* gxrow = gxplane + src;
                                                    for (int i = 0; i < n; ++i) gxrow[i] += wt * grow[i];
                                                }
                                                if (need_gw) {
                                                    const double* xrow = xplane + src;
                                                    for (int i = 0; i < n; ++i) acc += grow[i] * xrow[i];
                                                }
                                            }
                                            if (need_gw) gw.at4(o, c, dy, dx) += acc;
                                        }
                                }
                            }
                        if (need_gx) gr.accumulate(gs, px, gx);
                        if (need_gw) gr.accumulate(gs, pwid, gw);
                        if (need_gb) gr.accumulate(gs, pb, gb);
                    });
}

Var conv2d_fixed(Var m, const Tensor& kernel) {
    require_graph(m);
    Graph& g = *m.graph();
    const Tensor& mv = m.value();
    require(mv.ndim() == 4, "conv2d_fixed: expected a [B,C,H,W] tensor");
    require(kernel.ndim() == 2, "conv2d_fixed: kernel must be 2-D");
    const int kh = kernel.extent(0), kw = kernel.extent(1);
    require(kh % 2 == 1 && kw % 2 == 1, "conv2d_fixed: kernel extents must be odd");
    const int B = mv.extent(0), C = mv.extent(1), H = mv.extent(2), W = mv.extent(3);
    const int ph = kh / 2, pw = kw / 2;
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out({B, C, H, W});
    for (int bc = 0; bc < B * C; ++bc) {
        const double* xplane = mv.data() + bc * plane;
        double* oplane = out.data() + bc * plane;
        for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
                const double wt = kernel.at2(dy, dx);
                const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                const int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
                const int n = x1 - x0;
                for (int y = y0; y < y1; ++y) {
                    const double* xrow = xplane + static_cast<int64_t>(y + dy - ph) * W + (x0 + dx - pw);
                    double* orow = oplane + static_cast<int64_t>(y) * W + x0;
                    for (int i = 0; i < n; ++i) orow[i] += wt * xrow[i];
                }
            }
    }

    const int pm = m.id();
    Tensor ker = kernel;
    return g.add_op(std::move(out), {pm},
                    [pm, ker, B, C, H, W, kh, kw, ph, pw, plane](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        if (!gr.requires_grad(pm)) return;
                        Tensor gx = Tensor::zeros({B, C, H, W});
                        for (int bc = 0; bc < B * C; ++bc) {
                            const double* gplane = og.data() + bc * plane;
                            double* gxplane = gx.data() + bc * plane;
                            for (int dy = 0; dy < kh; ++dy)
                                for (int dx = 0; dx < kw; ++dx) {
                                    const double wt = ker.at2(dy, dx);
                                    const int y0 = std::max(0, ph - dy), y1 = std::min(H, H + ph - dy);
                                    const int x0 = std::max(0, pw - dx), x1 = std::min(W, W + pw - dx);
                                    const int n = x1 - x0;
                                    for (int y = y0; y < y1; ++y) {
                                        const double* grow = gplane + static_cast<int64_t>(y) * W + x0;
                                        double* gxrow = gxplane + static_cast<int64_t>(y + dy - ph) * W + (x0 + dx - pw);
                                        for (int i = 0; i < n; ++i) gxrow[i] += wt * grow[i];
                                    }
                                }
                        }
                        gr.accumulate(gs, pm, gx);
                    });
}

Var mean_filter_3x3(Var x) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    require(xv.ndim() == 4, "mean_filter_3x3: expected a [B,C,H,W] tensor");
    const int B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    require(H >= 1 && W >= 1, "mean_filter_3x3: empty spatial extent");
    const int64_t plane = static_cast<int64_t>(H) * W;

    // window sum divided by exactly 9.0; the operator is its own adjoint
    auto apply = [B, C, H, W, plane](const Tensor& in) {
        Tensor r({B, C, H, W});
        for (int bc = 0; bc < B * C; ++bc) {
            const double* ip = in.data() + bc * plane;
            double* op = r.data() + bc * plane;
            for (int y = 0; y < H; ++y)
                for (int x2 = 0; x2 < W; ++x2) {
                    double s = 0.0;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int yy = y + dy;
                        if (yy < 0 || yy >= H) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int xx = x2 + dx;
                            if (xx < 0 || xx >= W) continue;
                            s += ip[static_cast<int64_t>(yy) * W + xx];
                        }
                    }
                    op[static_cast<int64_t>(y) * W + x2] = s / 9.0;
                }
        }
        return r;
    };

    Tensor out = apply(xv);
    const int px = x.id();
    return g.add_op(std::move(out), {px}, [px, apply](Graph& gr, int, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        gr.accumulate(gs, px, apply(og));
    });
}

Var block_max_pool(Var m, int s) {
    require_graph(m);
    Graph& g = *m.graph();
    const Tensor& mv = m.value();
    require(mv.ndim() == 4, "block_max_pool: expected a [B,C,H,W] tensor");
    require(s >= 1, "block_max_pool: box size must be positive");
    const int B = mv.extent(0), C = mv.extent(1), H = mv.extent(2), W = mv.extent(3);
    const int OH = (H + s - 1) / s, OW = (W + s - 1) / s;

    Tensor out({B, C, OH, OW});
    std::vector<int64_t> arg(static_cast<size_t>(out.numel()), -1);
    const double* src = mv.data();
    double* dst = out.data();
    int64_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const int64_t plane = (static_cast<int64_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++o) {
                    // padded cells count as zeros; ties keep the first cell
                    // in row-major scan order, and a winning pad drops the
                    // gradient for that box
                    double best = -std::numeric_limits<double>::infinity();
                    int64_t best_idx = -1;
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx) {
                            const int y = oy * s + dy, x = ox * s + dx;
                            const bool pad = y >= H || x >= W;
                            const double v = pad ? 0.0 : src[plane + static_cast<int64_t>(y) * W + x];
                            if (v > best) {
                                best = v;
                                best_idx = pad ? -1 : plane + static_cast<int64_t>(y) * W + x;
                            }
                        }
                    dst[o] = best;
                    arg[static_cast<size_t>(o)] = best_idx;
                }
        }

    const int pm = m.id();
    std::vector<int> in_shape = mv.shape();
    return g.add_op(std::move(out), {pm},
                    [pm, arg = std::move(arg), in_shape](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        if (!gr.requires_grad(pm)) return;
                        Tensor t = Tensor::zeros(in_shape);
                        for (int64_t i = 0; i < og.numel(); ++i) {
                            const int64_t a = arg[static_cast<size_t>(i)];
                            if (a >= 0) t[a] += og[i];
                        }
                        gr.accumulate(gs, pm, t);
                    });
}

Var window_max(Var x, int k) {
    require_graph(x);
    Graph& g = *x.graph();
    const Tensor& xv = x.value();
    require(xv.ndim() == 4, "window_max: expected a [B,C,H,W] tensor");
    require(k >= 1 && k % 2 == 1, "window_max: window must be odd and positive");
    const int B = xv.extent(0), C = xv.extent(1), H = xv.extent(2), W = xv.extent(3);
    const int r = k / 2;
    const int64_t plane = static_cast<int64_t>(H) * W;

    Tensor out({B, C, H, W});
    std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
    for (int bc = 0; bc < B * C; ++bc) {
        const double* ip = xv.data() + bc * plane;
        double* op = out.data() + bc * plane;
        int64_t* ap = arg.data() + bc * plane;
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
                // border handled by coordinate clamping (edge replication)
                double best = -std::numeric_limits<double>::infinity();
                int64_t best_idx = -1;
                for (int dy = -r; dy <= r; ++dy) {
                    const int yy = std::clamp(y + dy, 0, H - 1);
                    for (int dx = -r; dx <= r; ++dx) {
                        const int xx = std::clamp(x2 + dx, 0, W - 1);
                        const double v = ip[static_cast<int64_t>(yy) * W + xx];
                        if (v > best) {
                            best = v;
                            best_idx = static_cast<int64_t>(yy) * W + xx;
                        }
                    }
                }
                op[static_cast<int64_t>(y) * W + x2] = best;
                ap[static_cast<int64_t>(y) * W + x2] = bc * plane + best_idx;
            }
    }

    const int px = x.id();
    std::vector<int> in_shape = xv.shape();
    return g.add_op(std::move(out), {px},
                    [px, arg = std::move(arg), in_shape](Graph& gr, int, const Tensor& og, Gradients& gs) {
                        if (!gr.requires_grad(px)) return;
                        Tensor t = Tensor::zeros(in_shape);
                        for (int64_t i = 0; i < og.numel(); ++i) t[arg[static_cast<size_t>(i)]] += og[i];
                        gr.accumulate(gs, px, t);
                    });
}

namespace {

struct FiberLayout {
    int C;
    int64_t inner;
    int64_t fibers; // outer * inner
};

FiberLayout fiber_layout(const Tensor& t, int axis) {
    require(axis >= 0 && axis < t.ndim(), "softmax: axis out of range");
    FiberLayout f;
    f.C = t.extent(axis);
    f.inner = 1;
    for (int i = axis + 1; i < t.ndim(); ++i) f.inner *= t.extent(i);
    const int64_t outer = f.C > 0 ? t.numel() / (static_cast<int64_t>(f.C) * f.inner) : 0;
    f.fibers = outer * f.inner;
    return f;
}

// iterate fibers as (outer, inner) pairs; base index of fiber j is
// (j / inner) * C * inner + (j % inner), stride inner
void softmax_forward(const Tensor& xv, int axis, Tensor& probs, Tensor& logp) {
    const FiberLayout f = fiber_layout(xv, axis);
    probs = Tensor(xv.shape());
    logp = Tensor(xv.shape());
    for (int64_t j = 0; j < f.fibers; ++j) {
        const int64_t base = (j / f.inner) * f.C * f.inner + (j % f.inner);
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < f.C; ++c) m = std::max(m, xv[base + c * f.inner]);
        double s = 0.0;
        for (int c = 0; c < f.C; ++c) s += std::exp(xv[base + c * f.inner] - m);
        const double ls = std::log(s);
        for (int c = 0; c < f.C; ++c) {
            const double e = xv[base + c * f.inner] - m;
            logp[base + c * f.inner] = e - ls;
            probs[base + c * f.inner] = std::exp(e) / s;
        }
    }
}

Var record_softmax(Graph& g, Var x, int axis, Tensor probs) {
    const int px = x.id();
    const FiberLayout f = fiber_layout(probs, axis);
    return g.add_op(std::move(probs), {px}, [px, f](Graph& gr, int self, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& p = gr.value(self);
        Tensor t(og.shape());
        for (int64_t j = 0; j < f.fibers; ++j) {
            const int64_t base = (j / f.inner) * f.C * f.inner + (j % f.inner);
            double dot = 0.0;
            for (int c = 0; c < f.C; ++c) dot += og[base + c * f.inner] * p[base + c * f.inner];
            for (int c = 0; c < f.C; ++c) {
                const int64_t i = base + c * f.inner;
                t[i] = p[i] * (og[i] - dot);
            }
        }
        gr.accumulate(gs, px, t);
    });
}

Var record_log_softmax(Graph& g, Var x, int axis, Tensor logp) {
    const int px = x.id();
    const FiberLayout f = fiber_layout(logp, axis);
    return g.add_op(std::move(logp), {px}, [px, f](Graph& gr, int self, const Tensor& og, Gradients& gs) {
        if (!gr.requires_grad(px)) return;
        const Tensor& lp = gr.value(self);
        Tensor t(og.shape());
        for (int64_t j = 0; j < f.fibers; ++j) {
            const int64_t base = (j / f.inner) * f.C * f.inner + (j % f.inner);
            double s = 0.0;
            for (int c = 0; c < f.C; ++c) s += og[base + c * f.inner];
            for (int c = 0; c < f.C; ++c) {
                const int64_t i = base + c * f.inner;
                t[i] = og[i] - std::exp(lp[i]) * s;
            }
        }
        gr.accumulate(gs, px, t);
    });
}

} // namespace

Var softmax(Var x, int axis) {
    require_graph(x);
    Tensor p, lp;
    softmax_forward(x.value(), axis, p, lp);
    return record_softmax(*x.graph(), x, axis, std::move(p));
}

Var log_softmax(Var x, int axis) {
    require_graph(x);
    Tensor p, lp;
    softmax_forward(x.value(), axis, p, lp);
    return record_log_softmax(*x.graph(), x, axis, std::move(lp));
}

SoftmaxLog softmax_log(Var x, int axis) {
    require_graph(x);
    Tensor p, lp;
    softmax_forward(x.value(), axis, p, lp);
    SoftmaxLog out;
    out.probs = record_softmax(*x.graph(), x, axis, std::move(p));
    out.logprobs = record_log_softmax(*x.graph(), x, axis, std::move(lp));
    return out;
}

Var stop_gradient(Var x) {
    require_graph(x);
    return x.graph()->add_barrier(x.value());
}

Gradients backward(Var loss) {
    require_graph(loss);
    return loss.graph()->backward(loss);
}

double grad_check(const ScalarFn& f, const Tensor& x, double h) {
    require(h > 0.0, "grad_check: step must be positive");
    Graph g;
    Var vx = g.leaf(x, true);
    Var y = f(g, vx);
    require(y.value().numel() == 1, "grad_check: function must be scalar-valued");
    const Gradients grads = g.backward(y);
    const Tensor analytic = grads.at(vx);

    double worst = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        Tensor xp = x, xm = x;
        xp[i] += h;
        xm[i] -= h;
        Graph gp, gm;
        const double fp = f(gp, gp.leaf(std::move(xp), false)).value()[0];
        const double fm = f(gm, gm.leaf(std::move(xm), false)).value()[0];
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace toposeg
