#include "sdl/graph.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace sdl {

const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::param: return "param";
    case OpKind::conv3x3: return "conv3x3";
    case OpKind::conv1x1: return "conv1x1";
    case OpKind::avgpool2: return "avgpool2";
    case OpKind::upsample2: return "upsample2";
    case OpKind::concat: return "concat";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::abs: return "abs";
    case OpKind::bcast_mul: return "bcast_mul";
    case OpKind::gelu: return "gelu";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::scale: return "scale";
    case OpKind::custom: return "custom";
  }
  return "?";
}

namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapMat = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using CMapMat = Eigen::Map<const RowMat<Scalar>>;

// Periodic 3x3 patch matrix for one batch item: (Cin * 9) x (H * W).
template <typename Scalar>
void im2col(const Scalar* x, Index cin, Index h, Index w, Scalar* col) {
  const Index hw = h * w;
  for (Index ci = 0; ci < cin; ++ci) {
    const Scalar* plane = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        Scalar* dst_plane = col + (ci * 9 + ky * 3 + kx) * hw;
        for (Index y = 0; y < h; ++y) {
          const Scalar* src = plane + ((y + ky - 1 + h) % h) * w;
          Scalar* dst = dst_plane + y * w;
          if (kx == 1) {
            std::memcpy(dst, src, sizeof(Scalar) * w);
          } else if (kx == 0) {
            dst[0] = src[w - 1];
            if (w > 1) std::memcpy(dst + 1, src, sizeof(Scalar) * (w - 1));
          } else {
            if (w > 1) std::memcpy(dst, src + 1, sizeof(Scalar) * (w - 1));
            dst[w - 1] = src[0];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* col, Index cin, Index h, Index w, Scalar* x) {
  const Index hw = h * w;
  for (Index ci = 0; ci < cin; ++ci) {
    Scalar* plane = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Scalar* src_plane = col + (ci * 9 + ky * 3 + kx) * hw;
        for (Index y = 0; y < h; ++y) {
          Scalar* dst = plane + ((y + ky - 1 + h) % h) * w;
          const Scalar* src = src_plane + y * w;
          if (kx == 1) {
            for (Index xx = 0; xx < w; ++xx) dst[xx] += src[xx];
          } else if (kx == 0) {
            // dst[xx - 1] += src[xx], wrapping at the left edge
            dst[w - 1] += src[0];
            for (Index xx = 1; xx < w; ++xx) dst[xx - 1] += src[xx];
          } else {
            for (Index xx = 0; xx + 1 < w; ++xx) dst[xx + 1] += src[xx];
            dst[0] += src[w - 1];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Tensor<Scalar>& ensure(Tensor<Scalar>& t, const Shape& s) {
  if (t.size() != s.size()) t = Tensor<Scalar>::zeros(s);
  return t;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

// Vectorized tanh-form GELU and its derivative.
template <typename Array>
Array gelu_array(const Array& x) {
  using S = typename Array::Scalar;
  const Array t = (S(kGeluC) * (x + S(kGeluA) * x.cube())).tanh();
  return S(0.5) * x * (S(1) + t);
}

template <typename Array>
Array gelu_grad_array(const Array& x) {
  using S = typename Array::Scalar;
  const Array t = (S(kGeluC) * (x + S(kGeluA) * x.cube())).tanh();
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t.square()) * S(kGeluC) * (S(1) + S(3 * kGeluA) * x.square());
}

}  // namespace

namespace kernels {

template <typename Scalar>
Tensor<Scalar> conv3x3(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.c != xs.c || ws.h != 3 || ws.w != 3) {
    throw ShapeError("conv3x3", "weight", ws, "(Cout," + std::to_string(xs.c) + ",3,3)");
  }
  if (b && b->size() != ws.n) throw ShapeError("conv3x3", "bias", b->shape(), "(1," + std::to_string(ws.n) + ",1,1)");
  const Index hw = xs.plane();
  Tensor<Scalar> out(Shape{xs.n, ws.n, xs.h, xs.w});
  RowMat<Scalar> col(xs.c * 9, hw);
  CMapMat<Scalar> wm(w.data(), ws.n, xs.c * 9);
  for (Index n = 0; n < xs.n; ++n) {
    im2col(x.data() + x.offset(n, 0, 0, 0), xs.c, xs.h, xs.w, col.data());
    MapMat<Scalar> o(out.data() + out.offset(n, 0, 0, 0), ws.n, hw);
    o.noalias() = wm * col;
    if (b) o.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(b->data(), ws.n);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv1x1(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>* b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.c != xs.c || ws.h != 1 || ws.w != 1) {
    throw ShapeError("conv1x1", "weight", ws, "(Cout," + std::to_string(xs.c) + ",1,1)");
  }
  if (b && b->size() != ws.n) throw ShapeError("conv1x1", "bias", b->shape(), "(1," + std::to_string(ws.n) + ",1,1)");
  const Index hw = xs.plane();
  Tensor<Scalar> out(Shape{xs.n, ws.n, xs.h, xs.w});
  CMapMat<Scalar> wm(w.data(), ws.n, xs.c);
  for (Index n = 0; n < xs.n; ++n) {
    CMapMat<Scalar> xi(x.data() + x.offset(n, 0, 0, 0), xs.c, hw);
    MapMat<Scalar> o(out.data() + out.offset(n, 0, 0, 0), ws.n, hw);
    o.noalias() = wm * xi;
    if (b) o.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(b->data(), ws.n);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> avgpool2(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avgpool2", "x", s, "even height and width");
  Tensor<Scalar> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      for (Index y = 0; y < s.h / 2; ++y)
        for (Index xx = 0; xx < s.w / 2; ++xx)
          dst(y, xx) = Scalar(0.25) * (src(2 * y, 2 * xx) + src(2 * y, 2 * xx + 1) + src(2 * y + 1, 2 * xx) +
                                       src(2 * y + 1, 2 * xx + 1));
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> upsample2(const Tensor<Scalar>& x) {
  const Shape& s = x.shape();
  Tensor<Scalar> out(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      for (Index y = 0; y < s.h * 2; ++y)
        for (Index xx = 0; xx < s.w * 2; ++xx) dst(y, xx) = src(y / 2, xx / 2);
    }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat", "b", sb, "(" + std::to_string(sa.n) + ",*," + std::to_string(sa.h) + "," +
                                            std::to_string(sa.w) + ")");
  }
  Tensor<Scalar> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const Index la = sa.c * sa.plane();
  const Index lb = sb.c * sb.plane();
  for (Index n = 0; n < sa.n; ++n) {
    out.array().segment(n * (la + lb), la) = a.array().segment(n * la, la);
    out.array().segment(n * (la + lb) + la, lb) = b.array().segment(n * lb, lb);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> bcast_mul(const Tensor<Scalar>& x, const Tensor<Scalar>& s) {
  const Shape& xs = x.shape();
  const Shape& ss = s.shape();
  if (!(ss.n == 1 || ss.n == xs.n) || ss.c != xs.c || ss.h == 0 || ss.w == 0 || xs.h % ss.h != 0 ||
      xs.w % ss.w != 0) {
    throw ShapeError("bcast_mul", "s", ss,
                     "(1 or " + std::to_string(xs.n) + "," + std::to_string(xs.c) + ",h,w) dividing " + xs.str());
  }
  Tensor<Scalar> out(xs);
  const Index ry = xs.h / ss.h;
  const Index rx = xs.w / ss.w;
  for (Index n = 0; n < xs.n; ++n) {
    const Index sn = ss.n == 1 ? 0 : n;
    for (Index c = 0; c < xs.c; ++c) {
      auto src = x.plane(n, c);
      auto dst = out.plane(n, c);
      if (ss.h == 1 && ss.w == 1) {
        dst = src * s(sn, c, 0, 0);
        continue;
      }
      for (Index y = 0; y < xs.h; ++y)
        for (Index xx = 0; xx < xs.w; ++xx) dst(y, xx) = src(y, xx) * s(sn, c, y / ry, xx / rx);
    }
  }
  return out;
}

template <typename Scalar>
Scalar gelu(Scalar x) {
  const double v = static_cast<double>(x);
  return static_cast<Scalar>(0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const double v = static_cast<double>(x);
  const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
  const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  return static_cast<Scalar>(0.5 * (1.0 + t) + 0.5 * v * dt);
}

}  // namespace kernels

template <typename Scalar>
auto Graph<Scalar>::node(Var v) const -> const Node& {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("Graph: invalid variable id " + std::to_string(v.id));
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename Scalar>
auto Graph<Scalar>::val(int id) const -> const T& {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.parameter ? n.parameter->value : n.value;
}

template <typename Scalar>
auto Graph<Scalar>::push(Node n) -> Var {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
bool Graph<Scalar>::grad_of(std::initializer_list<int> ids) const {
  for (int id : ids)
    if (id >= 0 && nodes_[static_cast<std::size_t>(id)].needs_grad) return true;
  return false;
}

template <typename Scalar>
void Graph<Scalar>::check_same(const char* op, Var a, Var b) const {
  if (!(value(a).shape() == value(b).shape())) throw ShapeError(op, "b", value(b).shape(), value(a).shape().str());
}

template <typename Scalar>
auto Graph<Scalar>::value(Var v) const -> const T& {
  node(v);
  return val(v.id);
}

template <typename Scalar>
Scalar Graph<Scalar>::item(Var v) const {
  const T& t = value(v);
  if (t.size() != 1) throw ShapeError("item", "v", t.shape(), "(1,1,1,1)");
  return t[0];
}

template <typename Scalar>
auto Graph<Scalar>::grad(Var v) const -> const T& {
  const Node& n = node(v);
  if (n.parameter) return n.parameter->grad;
  return n.leaf_grad;
}

template <typename Scalar>
auto Graph<Scalar>::input(T value, bool requires_grad) -> Var {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.needs_grad = requires_grad;
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::param(Parameter<Scalar>& p) -> Var {
  Node n;
  n.kind = OpKind::param;
  n.parameter = &p;
  n.needs_grad = p.trainable;
  n.label = p.name;
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::conv3x3(Var x, Var w, std::optional<Var> b) -> Var {
  Node n;
  n.kind = OpKind::conv3x3;
  n.value = kernels::conv3x3(value(x), value(w), b ? &value(*b) : nullptr);
  n.in = {x.id, w.id, b ? b->id : -1};
  n.needs_grad = grad_of({x.id, w.id, n.in[2]});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::conv1x1(Var x, Var w, std::optional<Var> b) -> Var {
  Node n;
  n.kind = OpKind::conv1x1;
  n.value = kernels::conv1x1(value(x), value(w), b ? &value(*b) : nullptr);
  n.in = {x.id, w.id, b ? b->id : -1};
  n.needs_grad = grad_of({x.id, w.id, n.in[2]});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::avgpool2(Var x) -> Var {
  Node n;
  n.kind = OpKind::avgpool2;
  n.value = kernels::avgpool2(value(x));
  n.in = {x.id, -1, -1};
  n.needs_grad = grad_of({x.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::upsample2(Var x) -> Var {
  Node n;
  n.kind = OpKind::upsample2;
  n.value = kernels::upsample2(value(x));
  n.in = {x.id, -1, -1};
  n.needs_grad = grad_of({x.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::concat(Var a, Var b) -> Var {
  Node n;
  n.kind = OpKind::concat;
  n.value = kernels::concat(value(a), value(b));
  n.in = {a.id, b.id, -1};
  n.needs_grad = grad_of({a.id, b.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::add(Var a, Var b) -> Var {
  check_same("add", a, b);
  Node n;
  n.kind = OpKind::add;
  n.value = T(value(a).shape(), value(a).array() + value(b).array());
  n.in = {a.id, b.id, -1};
  n.needs_grad = grad_of({a.id, b.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::sub(Var a, Var b) -> Var {
  check_same("sub", a, b);
  Node n;
  n.kind = OpKind::sub;
  n.value = T(value(a).shape(), value(a).array() - value(b).array());
  n.in = {a.id, b.id, -1};
  n.needs_grad = grad_of({a.id, b.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::mul(Var a, Var b) -> Var {
  check_same("mul", a, b);
  Node n;
  n.kind = OpKind::mul;
  n.value = T(value(a).shape(), value(a).array() * value(b).array());
  n.in = {a.id, b.id, -1};
  n.needs_grad = grad_of({a.id, b.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::abs(Var a) -> Var {
  Node n;
  n.kind = OpKind::abs;
  n.value = T(value(a).shape(), value(a).array().abs());
  n.in = {a.id, -1, -1};
  n.needs_grad = grad_of({a.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::bcast_mul(Var x, Var s) -> Var {
  Node n;
  n.kind = OpKind::bcast_mul;
  n.value = kernels::bcast_mul(value(x), value(s));
  n.in = {x.id, s.id, -1};
  n.needs_grad = grad_of({x.id, s.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::gelu(Var x) -> Var {
  Node n;
  n.kind = OpKind::gelu;
  n.value = T(value(x).shape(), gelu_array(value(x).array()));
  n.in = {x.id, -1, -1};
  n.needs_grad = grad_of({x.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::sum(Var x, const RowWeights* row_weights) -> Var {
  const T& xv = value(x);
  const Shape& s = xv.shape();
  Node n;
  n.kind = OpKind::sum;
  n.in = {x.id, -1, -1};
  n.needs_grad = grad_of({x.id});
  if (row_weights) {
    if (row_weights->size() != s.h) {
      throw ShapeError("sum", "row_weights", Shape{1, 1, row_weights->size(), 1}, "length " + std::to_string(s.h));
    }
    n.weights = *row_weights;
    Scalar acc = 0;
    for (Index b = 0; b < s.n; ++b)
      for (Index c = 0; c < s.c; ++c) acc += (xv.plane(b, c).rowwise().sum().array() * n.weights).sum();
    n.value = T(Shape{}, acc);
  } else {
    n.value = T(Shape{}, xv.array().sum());
  }
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::mean(Var x, const RowWeights* row_weights) -> Var {
  Var total = sum(x, row_weights);
  Node& n = nodes_[static_cast<std::size_t>(total.id)];
  n.kind = OpKind::mean;
  n.factor = Scalar(1) / static_cast<Scalar>(value(x).size());
  n.value.array() *= n.factor;
  return total;
}

template <typename Scalar>
auto Graph<Scalar>::scale(Var x, Scalar factor) -> Var {
  Node n;
  n.kind = OpKind::scale;
  n.factor = factor;
  n.value = T(value(x).shape(), value(x).array() * factor);
  n.in = {x.id, -1, -1};
  n.needs_grad = grad_of({x.id});
  return push(std::move(n));
}

template <typename Scalar>
auto Graph<Scalar>::custom(T out, std::vector<Var> inputs, BackwardFn backward, std::string label) -> Var {
  Node n;
  n.kind = OpKind::custom;
  n.value = std::move(out);
  n.custom = std::move(backward);
  n.label = std::move(label);
  for (Var v : inputs) {
    node(v);
    n.custom_in.push_back(v.id);
    n.needs_grad = n.needs_grad || nodes_[static_cast<std::size_t>(v.id)].needs_grad;
  }
  return push(std::move(n));
}

template <typename Scalar>
void Graph<Scalar>::zero_leaf_grads() {
  for (Node& n : nodes_)
    if (n.kind == OpKind::leaf && n.needs_grad) n.leaf_grad = T::zeros(n.value.shape());
}

template <typename Scalar>
void Graph<Scalar>::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1) throw ShapeError("backward", "loss", root.value.shape(), "scalar (1,1,1,1)");
  std::vector<T> adj(nodes_.size());
  adj[static_cast<std::size_t>(loss.id)] = T(root.value.shape(), Scalar(1));
  last_visits_ = 0;

  auto accum = [&](int id) -> T* {
    if (id < 0 || !nodes_[static_cast<std::size_t>(id)].needs_grad) return nullptr;
    return &ensure(adj[static_cast<std::size_t>(id)], val(id).shape());
  };

  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    T& g = adj[static_cast<std::size_t>(i)];
    if (!n.needs_grad || g.empty()) continue;
    ++last_visits_;
    const auto& gi = g.array();
    switch (n.kind) {
      case OpKind::leaf:
        ensure(n.leaf_grad, n.value.shape()).array() += gi;
        break;
      case OpKind::param:
        if (!n.parameter->has_grad()) n.parameter->zero_grad();
        n.parameter->grad.array() += gi;
        break;
      case OpKind::conv3x3:
      case OpKind::conv1x1: {
        const T& x = val(n.in[0]);
        const T& w = val(n.in[1]);
        const Shape& xs = x.shape();
        const Index cout = w.shape().n;
        const Index k = n.kind == OpKind::conv3x3 ? xs.c * 9 : xs.c;
        const Index hw = xs.plane();
        T* gx = accum(n.in[0]);
        T* gw = accum(n.in[1]);
        T* gb = accum(n.in[2]);
        CMapMat<Scalar> wm(w.data(), cout, k);
        RowMat<Scalar> col;
        if (n.kind == OpKind::conv3x3) col.resize(k, hw);
        for (Index b = 0; b < xs.n; ++b) {
          CMapMat<Scalar> go(g.data() + g.offset(b, 0, 0, 0), cout, hw);
          const Scalar* xb = x.data() + x.offset(b, 0, 0, 0);
          if (n.kind == OpKind::conv3x3) {
            if (gw) {
              im2col(xb, xs.c, xs.h, xs.w, col.data());
              MapMat<Scalar>(gw->data(), cout, k).noalias() += go * col.transpose();
            }
            if (gx) {
              RowMat<Scalar> gcol = wm.transpose() * go;
              col2im_add(gcol.data(), xs.c, xs.h, xs.w, gx->data() + gx->offset(b, 0, 0, 0));
            }
          } else {
            CMapMat<Scalar> xm(xb, xs.c, hw);
            if (gw) MapMat<Scalar>(gw->data(), cout, k).noalias() += go * xm.transpose();
            if (gx) MapMat<Scalar>(gx->data() + gx->offset(b, 0, 0, 0), xs.c, hw).noalias() += wm.transpose() * go;
          }
          if (gb) Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(gb->data(), cout) += go.rowwise().sum();
        }
        break;
      }
      case OpKind::avgpool2: {
        if (T* gx = accum(n.in[0])) {
          const Shape& s = g.shape();
          for (Index b = 0; b < s.n; ++b)
            for (Index c = 0; c < s.c; ++c) {
              auto src = g.plane(b, c);
              auto dst = gx->plane(b, c);
              for (Index y = 0; y < s.h * 2; ++y)
                for (Index xx = 0; xx < s.w * 2; ++xx) dst(y, xx) += Scalar(0.25) * src(y / 2, xx / 2);
            }
        }
        break;
      }
      case OpKind::upsample2: {
        if (T* gx = accum(n.in[0])) {
          const Shape& s = gx->shape();
          for (Index b = 0; b < s.n; ++b)
            for (Index c = 0; c < s.c; ++c) {
              auto src = g.plane(b, c);
              auto dst = gx->plane(b, c);
              for (Index y = 0; y < s.h; ++y)
                for (Index xx = 0; xx < s.w; ++xx)
                  dst(y, xx) += src(2 * y, 2 * xx) + src(2 * y, 2 * xx + 1) + src(2 * y + 1, 2 * xx) +
                                src(2 * y + 1, 2 * xx + 1);
            }
        }
        break;
      }
      case OpKind::concat: {
        const Shape& sa = val(n.in[0]).shape();
        const Shape& sb = val(n.in[1]).shape();
        const Index la = sa.c * sa.plane();
        const Index lb = sb.c * sb.plane();
        T* ga = accum(n.in[0]);
        T* gb = accum(n.in[1]);
        for (Index b = 0; b < sa.n; ++b) {
          if (ga) ga->array().segment(b * la, la) += gi.segment(b * (la + lb), la);
          if (gb) gb->array().segment(b * lb, lb) += gi.segment(b * (la + lb) + la, lb);
        }
        break;
      }
      case OpKind::add:
        if (T* ga = accum(n.in[0])) ga->array() += gi;
        if (T* gb = accum(n.in[1])) gb->array() += gi;
        break;
      case OpKind::sub:
        if (T* ga = accum(n.in[0])) ga->array() += gi;
        if (T* gb = accum(n.in[1])) gb->array() -= gi;
        break;
      case OpKind::mul:
        if (T* ga = accum(n.in[0])) ga->array() += gi * val(n.in[1]).array();
        if (T* gb = accum(n.in[1])) gb->array() += gi * val(n.in[0]).array();
        break;
      case OpKind::abs: {
        const auto& a = val(n.in[0]).array();
        if (T* ga = accum(n.in[0])) {
          ga->array() += gi * a.unaryExpr([](Scalar v) { return v > 0 ? Scalar(1) : (v < 0 ? Scalar(-1) : Scalar(0)); });
        }
        break;
      }
      case OpKind::bcast_mul: {
        const T& x = val(n.in[0]);
        const T& s = val(n.in[1]);
        const Shape& xs = x.shape();
        const Shape& ss = s.shape();
        T* gx = accum(n.in[0]);
        T* gs = accum(n.in[1]);
        if (gx) gx->array() += kernels::bcast_mul(g, s).array();
        if (gs) {
          const Index ry = xs.h / ss.h;
          const Index rx = xs.w / ss.w;
          for (Index b = 0; b < xs.n; ++b) {
            const Index sn = ss.n == 1 ? 0 : b;
            for (Index c = 0; c < xs.c; ++c) {
              auto go = g.plane(b, c);
              auto xv = x.plane(b, c);
              if (ss.h == 1 && ss.w == 1) {
                (*gs)(sn, c, 0, 0) += (go.array() * xv.array()).sum();
                continue;
              }
              for (Index y = 0; y < xs.h; ++y)
                for (Index xx = 0; xx < xs.w; ++xx) (*gs)(sn, c, y / ry, xx / rx) += go(y, xx) * xv(y, xx);
            }
          }
        }
        break;
      }
      case OpKind::gelu:
        if (T* gx = accum(n.in[0])) {
          gx->array() += gi * gelu_grad_array(val(n.in[0]).array());
        }
        break;
      case OpKind::sum:
      case OpKind::mean: {
        if (T* gx = accum(n.in[0])) {
          const Scalar seed = gi[0] * (n.kind == OpKind::mean ? n.factor : Scalar(1));
          if (n.weights.size() == 0) {
            gx->array() += seed;
          } else {
            const Shape& s = gx->shape();
            for (Index b = 0; b < s.n; ++b)
              for (Index c = 0; c < s.c; ++c) gx->plane(b, c).colwise() += (seed * n.weights).matrix();
          }
        }
        break;
      }
      case OpKind::scale:
        if (T* gx = accum(n.in[0])) gx->array() += gi * n.factor;
        break;
      case OpKind::custom: {
        std::vector<T> local;
        local.reserve(n.custom_in.size());
        for (int id : n.custom_in) local.push_back(T::zeros(val(id).shape()));
        n.custom(g, std::span<T>(local));
        for (std::size_t j = 0; j < n.custom_in.size(); ++j)
          if (T* gj = accum(n.custom_in[j])) gj->array() += local[j].array();
        break;
      }
    }
    // Interior adjoints are not needed once propagated.
    if (n.kind != OpKind::leaf && n.kind != OpKind::param) g = T();
  }
}

template class Graph<float>;
template class Graph<double>;

#define SDL_INSTANTIATE_KERNELS(S)                                                         \
  template Tensor<S> kernels::conv3x3(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*); \
  template Tensor<S> kernels::conv1x1(const Tensor<S>&, const Tensor<S>&, const Tensor<S>*); \
  template Tensor<S> kernels::avgpool2(const Tensor<S>&);                                  \
  template Tensor<S> kernels::upsample2(const Tensor<S>&);                                 \
  template Tensor<S> kernels::concat(const Tensor<S>&, const Tensor<S>&);                  \
  template Tensor<S> kernels::bcast_mul(const Tensor<S>&, const Tensor<S>&);               \
  template S kernels::gelu(S);                                                             \
  template S kernels::gelu_grad(S);

SDL_INSTANTIATE_KERNELS(float)
SDL_INSTANTIATE_KERNELS(double)

}  // namespace sdl
