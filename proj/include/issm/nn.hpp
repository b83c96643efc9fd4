#pragma once

// Neural network layers on top of the autodiff tape: dense (optionally
// weight-normalized), 3D convolution, residual blocks, pooling, plus the
// Adam optimizer and the named-tensor checkpoint format.

#include <memory>
#include <variant>

#include <json.hpp>

#include "issm/simd.hpp"
#include "issm/tensor.hpp"

namespace issm::nn {

using issm::ad::Tensor;

using issm::simd::axpy;
using issm::simd::dot8;

// ---- fused dense ops ----------------------------------------------------------

// y = x * w^T + b with w stored [out,in].
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x->shape.size() != 2 || w->shape.size() != 2 || x->shape[1] != w->shape[1] ||
      b->numel() != w->shape[0])
    throw ValidationError("linear: shape mismatch");
  const int n = x->shape[0], in = x->shape[1], out_dim = w->shape[0];
  auto out = ad::detail::make_op<S>(
      {n, out_dim}, {x, w, b}, [x, w, b, n, in, out_dim](ad::Node<S>& self) {
        const S* g = self.grad.data();
        if (x->requires_grad) {
          S* dx = x->grad.data();
          const S* wv = w->val.data();
          parallel_for(0, n, [&](int64_t i) {
            const S* gi = g + i * out_dim;
            S* dxi = dx + i * in;
            for (int o = 0; o < out_dim; ++o) {
              const S go = gi[o];
              if (go == S(0)) continue;
              axpy(go, wv + o * in, dxi, in);
            }
          });
        }
        if (w->requires_grad) {
          S* dw = w->grad.data();
          const S* xv = x->val.data();
          const int nt = std::max(1, std::min(thread_count(), out_dim));
          const int chunk = (out_dim + nt - 1) / nt;
          parallel_for(0, nt, [&](int64_t t) {
            const int o0 = static_cast<int>(t) * chunk;
            const int o1 = std::min(out_dim, o0 + chunk);
            for (int i = 0; i < n; ++i) {
              const S* gi = g + i * out_dim;
              const S* xi = xv + i * in;
              for (int o = o0; o < o1; ++o) {
                const S go = gi[o];
                if (go == S(0)) continue;
                axpy(go, xi, dw + o * in, in);
              }
            }
          });
        }
        if (b->requires_grad) {
          S* db = b->grad.data();
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_dim; ++o) db[o] += g[i * out_dim + o];
        }
      });
  const S* xv = x->val.data();
  const S* wv = w->val.data();
  const S* bv = b->val.data();
  S* yv = out->val.data();
  parallel_for(0, n, [&](int64_t i) {
    const S* xi = xv + i * in;
    S* yi = yv + i * out_dim;
    for (int o = 0; o < out_dim; ++o)
      yi[o] = bv[o] + dot8(xi, wv + o * in, in);
  });
  return out;
}

// Weight-normalized dense layer: effective weight w_o = g_o * v_o / ||v_o||.
template <typename S>
Tensor<S> weightnorm_linear(const Tensor<S>& x, const Tensor<S>& v, const Tensor<S>& g,
                            const Tensor<S>& b) {
  if (x->shape.size() != 2 || v->shape.size() != 2 || x->shape[1] != v->shape[1] ||
      g->numel() != v->shape[0] || b->numel() != v->shape[0])
    throw ValidationError("weightnorm_linear: shape mismatch");
  const int n = x->shape[0], in = x->shape[1], out_dim = v->shape[0];

  // effective weights cached for both passes
  auto weff = std::make_shared<std::vector<S>>(static_cast<size_t>(out_dim) * in);
  auto norms = std::make_shared<std::vector<S>>(out_dim);
  for (int o = 0; o < out_dim; ++o) {
    S nrm2 = S(0);
    const S* vo = v->val.data() + o * in;
    for (int p = 0; p < in; ++p) nrm2 += vo[p] * vo[p];
    const S nrm = std::sqrt(nrm2);
    (*norms)[o] = nrm;
    const S c = g->val[o] / nrm;
    S* wo = weff->data() + o * in;
    for (int p = 0; p < in; ++p) wo[p] = c * vo[p];
  }

  auto out = ad::detail::make_op<S>(
      {n, out_dim}, {x, v, g, b},
      [x, v, g, b, weff, norms, n, in, out_dim](ad::Node<S>& self) {
        const S* gr = self.grad.data();
        if (x->requires_grad) {
          S* dx = x->grad.data();
          const S* wv = weff->data();
          parallel_for(0, n, [&](int64_t i) {
            const S* gi = gr + i * out_dim;
            S* dxi = dx + i * in;
            for (int o = 0; o < out_dim; ++o) {
              const S go = gi[o];
              if (go == S(0)) continue;
              axpy(go, wv + o * in, dxi, in);
            }
          });
        }
        if (v->requires_grad || g->requires_grad) {
          // dW[o,:] = sum_i gr[i,o] x[i,:], then chain through the
          // normalization: dg_o = dW_o . v_o / n_o,
          // dv_o = g_o/n_o (dW_o - (dW_o . v_o) v_o / n_o^2)
          const S* xv = x->val.data();
          const int nt = std::max(1, std::min(thread_count(), out_dim));
          const int chunk = (out_dim + nt - 1) / nt;
          parallel_for(0, nt, [&](int64_t t) {
            const int o0 = static_cast<int>(t) * chunk;
            const int o1 = std::min(out_dim, o0 + chunk);
            std::vector<S> dwo(in);
            for (int o = o0; o < o1; ++o) {
              std::fill(dwo.begin(), dwo.end(), S(0));
              for (int i = 0; i < n; ++i) {
                const S go = gr[i * out_dim + o];
                if (go == S(0)) continue;
                axpy(go, xv + i * in, dwo.data(), in);
              }
              const S* vo = v->val.data() + o * in;
              const S nrm = (*norms)[o];
              S dot = S(0);
              for (int p = 0; p < in; ++p) dot += dwo[p] * vo[p];
              if (g->requires_grad) g->grad[o] += dot / nrm;
              if (v->requires_grad) {
                const S c = g->val[o] / nrm;
                const S d = dot / (nrm * nrm);
                S* dv = v->grad.data() + o * in;
                for (int p = 0; p < in; ++p) dv[p] += c * (dwo[p] - d * vo[p]);
              }
            }
          });
        }
        if (b->requires_grad) {
          S* db = b->grad.data();
          for (int i = 0; i < n; ++i)
            for (int o = 0; o < out_dim; ++o) db[o] += gr[i * out_dim + o];
        }
      });
  const S* xv = x->val.data();
  const S* wv = weff->data();
  const S* bv = b->val.data();
  S* yv = out->val.data();
  parallel_for(0, n, [&](int64_t i) {
    const S* xi = xv + i * in;
    S* yi = yv + i * out_dim;
    for (int o = 0; o < out_dim; ++o)
      yi[o] = bv[o] + dot8(xi, wv + o * in, in);
  });
  return out;
}

// ---- 3D convolution -------------------------------------------------------------

// x [Ci,D,H,W], w [Co,Ci,k,k,k], b [Co]; zero padding.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                 int pad) {
  if (x->shape.size() != 4 || w->shape.size() != 5 || x->shape[0] != w->shape[1] ||
      b->numel() != w->shape[0])
    throw ValidationError("conv3d: shape mismatch");
  const int ci = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int co = w->shape[0], k = w->shape[2];
  if (w->shape[3] != k || w->shape[4] != k) throw ValidationError("conv3d: kernel must be cubic");
  const int Do = (D + 2 * pad - k) / stride + 1;
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (Do <= 0 || Ho <= 0 || Wo <= 0) throw ValidationError("conv3d: output would be empty");

  const auto in_idx = [=](int c, int z, int y, int xx) {
    return ((static_cast<int64_t>(c) * D + z) * H + y) * W + xx;
  };
  const auto out_idx = [=](int c, int z, int y, int xx) {
    return ((static_cast<int64_t>(c) * Do + z) * Ho + y) * Wo + xx;
  };
  const auto w_idx = [=](int o, int c, int kz, int ky, int kx) {
    return (((static_cast<int64_t>(o) * ci + c) * k + kz) * k + ky) * k + kx;
  };

  // valid output-x range for a given kx so that ix = xx*stride + kx - pad
  // stays inside [0, W); stride-1 paths act on whole rows
  const auto x_range = [=](int kx, int& x0, int& x1) {
    x0 = std::max(0, pad - kx);
    x1 = std::min(Wo, W + pad - kx);
  };

  auto out = ad::detail::make_op<S>(
      {co, Do, Ho, Wo}, {x, w, b},
      [=](ad::Node<S>& self) {
        const S* g = self.grad.data();
        if (w->requires_grad || b->requires_grad) {
          parallel_for(0, co, [&](int64_t o) {
            const S* xv = x->val.data();
            S db = S(0);
            for (int64_t i = out_idx(static_cast<int>(o), 0, 0, 0);
                 i < out_idx(static_cast<int>(o) + 1, 0, 0, 0); ++i)
              db += g[i];
            if (b->requires_grad) b->grad[o] += db;
            if (!w->requires_grad) return;
            for (int c = 0; c < ci; ++c)
              for (int kz = 0; kz < k; ++kz)
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) {
                    S acc = S(0);
                    for (int z = 0; z < Do; ++z) {
                      const int iz = z * stride + kz - pad;
                      if (iz < 0 || iz >= D) continue;
                      for (int y = 0; y < Ho; ++y) {
                        const int iy = y * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        const S* grow = g + out_idx(static_cast<int>(o), z, y, 0);
                        const S* xrow = xv + in_idx(c, iz, iy, 0);
                        if (stride == 1) {
                          int x0, x1;
                          x_range(kx, x0, x1);
                          if (x1 > x0) acc += dot8(grow + x0, xrow + x0 + kx - pad, x1 - x0);
                        } else {
                          for (int xx = 0; xx < Wo; ++xx) {
                            const int ix = xx * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            acc += grow[xx] * xrow[ix];
                          }
                        }
                      }
                    }
                    w->grad[w_idx(static_cast<int>(o), c, kz, ky, kx)] += acc;
                  }
          });
        }
        if (x->requires_grad) {
          parallel_for(0, ci, [&](int64_t c) {
            const S* wv = w->val.data();
            for (int o = 0; o < co; ++o)
              for (int z = 0; z < Do; ++z)
                for (int kz = 0; kz < k; ++kz) {
                  const int iz = z * stride + kz - pad;
                  if (iz < 0 || iz >= D) continue;
                  for (int y = 0; y < Ho; ++y)
                    for (int ky = 0; ky < k; ++ky) {
                      const int iy = y * stride + ky - pad;
                      if (iy < 0 || iy >= H) continue;
                      const S* grow = g + out_idx(o, z, y, 0);
                      S* dxrow = x->grad.data() + in_idx(static_cast<int>(c), iz, iy, 0);
                      const S* wrow = wv + w_idx(o, static_cast<int>(c), kz, ky, 0);
                      for (int kx = 0; kx < k; ++kx) {
                        if (wrow[kx] == S(0)) continue;
                        if (stride == 1) {
                          int x0, x1;
                          x_range(kx, x0, x1);
                          if (x1 > x0) axpy(wrow[kx], grow + x0, dxrow + x0 + kx - pad, x1 - x0);
                        } else {
                          for (int xx = 0; xx < Wo; ++xx) {
                            const int ix = xx * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            dxrow[ix] += wrow[kx] * grow[xx];
                          }
                        }
                      }
                    }
                }
          });
        }
      });

  const S* xv = x->val.data();
  const S* wv = w->val.data();
  S* yv = out->val.data();
  parallel_for(0, co, [&](int64_t o) {
    // bias fill, then row-wise accumulation
    for (int64_t i = out_idx(static_cast<int>(o), 0, 0, 0);
         i < out_idx(static_cast<int>(o) + 1, 0, 0, 0); ++i)
      yv[i] = b->val[o];
    for (int c = 0; c < ci; ++c)
      for (int z = 0; z < Do; ++z)
        for (int kz = 0; kz < k; ++kz) {
          const int iz = z * stride + kz - pad;
          if (iz < 0 || iz >= D) continue;
          for (int y = 0; y < Ho; ++y)
            for (int ky = 0; ky < k; ++ky) {
              const int iy = y * stride + ky - pad;
              if (iy < 0 || iy >= H) continue;
              S* yrow = yv + out_idx(static_cast<int>(o), z, y, 0);
              const S* xrow = xv + in_idx(c, iz, iy, 0);
              const S* wrow = wv + w_idx(static_cast<int>(o), c, kz, ky, 0);
              for (int kx = 0; kx < k; ++kx) {
                if (wrow[kx] == S(0)) continue;
                if (stride == 1) {
                  int x0, x1;
                  x_range(kx, x0, x1);
                  if (x1 > x0) axpy(wrow[kx], xrow + x0 + kx - pad, yrow + x0, x1 - x0);
                } else {
                  for (int xx = 0; xx < Wo; ++xx) {
                    const int ix = xx * stride + kx - pad;
                    if (ix < 0 || ix >= W) continue;
                    yrow[xx] += wrow[kx] * xrow[ix];
                  }
                }
              }
            }
        }
  });
  return out;
}

// 2x2x2 max pooling, stride 2 (floor semantics on odd dims).
template <typename S>
Tensor<S> max_pool3d(const Tensor<S>& x) {
  if (x->shape.size() != 4) throw ValidationError("max_pool3d: need [C,D,H,W]");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Do = std::max(1, D / 2), Ho = std::max(1, H / 2), Wo = std::max(1, W / 2);
  auto argmax = std::make_shared<std::vector<int64_t>>(
      static_cast<size_t>(C) * Do * Ho * Wo);

  auto out = ad::detail::make_op<S>(
      {C, Do, Ho, Wo}, {x}, [x, argmax](ad::Node<S>& self) {
        for (size_t i = 0; i < self.grad.size(); ++i) x->grad[(*argmax)[i]] += self.grad[i];
      });

  const auto in_idx = [=](int c, int z, int y, int xx) {
    return ((static_cast<int64_t>(c) * D + z) * H + y) * W + xx;
  };
  size_t oi = 0;
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx, ++oi) {
          S best = -std::numeric_limits<S>::infinity();
          int64_t bi = -1;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                int iz = std::min(D - 1, z * 2 + dz);
                int iy = std::min(H - 1, y * 2 + dy);
                int ix = std::min(W - 1, xx * 2 + dx);
                int64_t ii = in_idx(c, iz, iy, ix);
                if (x->val[ii] > best) {
                  best = x->val[ii];
                  bi = ii;
                }
              }
          out->val[oi] = best;
          (*argmax)[oi] = bi;
        }
  return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x->shape.size() != 4) throw ValidationError("global_avg_pool: need [C,D,H,W]");
  const int C = x->shape[0];
  const int64_t vox = static_cast<int64_t>(x->shape[1]) * x->shape[2] * x->shape[3];
  const S inv = S(1) / static_cast<S>(vox);
  auto out = ad::detail::make_op<S>(
      {C}, {x}, [x, C, vox, inv](ad::Node<S>& self) {
        for (int c = 0; c < C; ++c) {
          const S g = self.grad[c] * inv;
          S* dx = x->grad.data() + c * vox;
          for (int64_t i = 0; i < vox; ++i) dx[i] += g;
        }
      });
  for (int c = 0; c < C; ++c) {
    S acc = S(0);
    const S* xv = x->val.data() + c * vox;
    for (int64_t i = 0; i < vox; ++i) acc += xv[i];
    out->val[c] = acc * inv;
  }
  return out;
}

// nearest-neighbor 2x upsampling
template <typename S>
Tensor<S> upsample_nearest2(const Tensor<S>& x) {
  if (x->shape.size() != 4) throw ValidationError("upsample_nearest2: need [C,D,H,W]");
  const int C = x->shape[0], D = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int Do = D * 2, Ho = H * 2, Wo = W * 2;
  auto out = ad::detail::make_op<S>(
      {C, Do, Ho, Wo}, {x}, [=](ad::Node<S>& self) {
        for (int c = 0; c < C; ++c)
          for (int z = 0; z < Do; ++z)
            for (int y = 0; y < Ho; ++y)
              for (int xx = 0; xx < Wo; ++xx) {
                int64_t oi = ((static_cast<int64_t>(c) * Do + z) * Ho + y) * Wo + xx;
                int64_t ii =
                    ((static_cast<int64_t>(c) * D + z / 2) * H + y / 2) * W + xx / 2;
                x->grad[ii] += self.grad[oi];
              }
      });
  for (int c = 0; c < C; ++c)
    for (int z = 0; z < Do; ++z)
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          int64_t oi = ((static_cast<int64_t>(c) * Do + z) * Ho + y) * Wo + xx;
          int64_t ii = ((static_cast<int64_t>(c) * D + z / 2) * H + y / 2) * W + xx / 2;
          out->val[oi] = x->val[ii];
        }
  return out;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a->shape.size() != 4 || b->shape.size() != 4 || a->shape[1] != b->shape[1] ||
      a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
    throw ValidationError("concat_channels: spatial dims mismatch");
  const int ca = a->shape[0], cb = b->shape[0];
  const int64_t vox = static_cast<int64_t>(a->shape[1]) * a->shape[2] * a->shape[3];
  auto out = ad::detail::make_op<S>(
      {ca + cb, a->shape[1], a->shape[2], a->shape[3]}, {a, b},
      [a, b, ca, cb, vox](ad::Node<S>& self) {
        if (a->requires_grad)
          for (int64_t i = 0; i < ca * vox; ++i) a->grad[i] += self.grad[i];
        if (b->requires_grad)
          for (int64_t i = 0; i < cb * vox; ++i) b->grad[i] += self.grad[ca * vox + i];
      });
  std::copy(a->val.begin(), a->val.end(), out->val.begin());
  std::copy(b->val.begin(), b->val.end(), out->val.begin() + ca * vox);
  return out;
}

// ---- network specs --------------------------------------------------------------

struct DenseSpec {
  int in = 0, out = 0;
  bool weight_norm = false;
  double dropout_p = 0.0;
  bool relu = false;
};
struct Conv3dSpec {
  int in_ch = 0, out_ch = 0, kernel = 3, stride = 1, pad = 1;
  bool relu = true;
};
// conv-relu-conv plus identity (or 1x1 projection) skip, relu on the sum
struct ResBlock3dSpec {
  int in_ch = 0, out_ch = 0;
};
struct MaxPool3dSpec {};
struct GlobalAvgPoolSpec {};
struct ConcatLatentSpec {};

using LayerSpec = std::variant<DenseSpec, Conv3dSpec, ResBlock3dSpec, MaxPool3dSpec,
                               GlobalAvgPoolSpec, ConcatLatentSpec>;

struct NetSpec {
  std::vector<LayerSpec> layers;
  int latent_dim = 0;  // width added at the concat point, 0 if unused
};

inline nlohmann::json netspec_to_json(const NetSpec& spec) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j;
    if (const auto* d = std::get_if<DenseSpec>(&l)) {
      j = {{"type", "dense"},        {"in", d->in},
           {"out", d->out},          {"weight_norm", d->weight_norm},
           {"dropout", d->dropout_p}, {"relu", d->relu}};
    } else if (const auto* c = std::get_if<Conv3dSpec>(&l)) {
      j = {{"type", "conv3d"}, {"in", c->in_ch},     {"out", c->out_ch}, {"kernel", c->kernel},
           {"stride", c->stride}, {"pad", c->pad},   {"relu", c->relu}};
    } else if (const auto* r = std::get_if<ResBlock3dSpec>(&l)) {
      j = {{"type", "res_block3d"}, {"in", r->in_ch}, {"out", r->out_ch}};
    } else if (std::holds_alternative<MaxPool3dSpec>(l)) {
      j = {{"type", "max_pool3d"}};
    } else if (std::holds_alternative<GlobalAvgPoolSpec>(l)) {
      j = {{"type", "global_avg_pool"}};
    } else {
      j = {{"type", "concat_latent"}};
    }
    arr.push_back(j);
  }
  return nlohmann::json{{"layers", arr}, {"latent_dim", spec.latent_dim}};
}

inline NetSpec netspec_from_json(const nlohmann::json& j) {
  NetSpec spec;
  spec.latent_dim = j.value("latent_dim", 0);
  for (const auto& l : j.at("layers")) {
    const std::string type = l.at("type");
    if (type == "dense") {
      spec.layers.push_back(DenseSpec{l.at("in"), l.at("out"), l.at("weight_norm"),
                                      l.at("dropout"), l.at("relu")});
    } else if (type == "conv3d") {
      spec.layers.push_back(Conv3dSpec{l.at("in"), l.at("out"), l.at("kernel"), l.at("stride"),
                                       l.at("pad"), l.at("relu")});
    } else if (type == "res_block3d") {
      spec.layers.push_back(ResBlock3dSpec{l.at("in"), l.at("out")});
    } else if (type == "max_pool3d") {
      spec.layers.push_back(MaxPool3dSpec{});
    } else if (type == "global_avg_pool") {
      spec.layers.push_back(GlobalAvgPoolSpec{});
    } else if (type == "concat_latent") {
      spec.layers.push_back(ConcatLatentSpec{});
    } else {
      throw ValidationError("unknown layer type: " + type);
    }
  }
  return spec;
}

// Validate that consecutive layer widths line up (dense chains track the
// column width; conv chains track the channel count).
inline void validate_netspec(const NetSpec& spec) {
  int width = -1;
  for (const auto& l : spec.layers) {
    if (const auto* d = std::get_if<DenseSpec>(&l)) {
      if (width >= 0 && width != d->in) throw ValidationError("netspec: dense width mismatch");
      if (d->dropout_p < 0.0 || d->dropout_p >= 1.0)
        throw ValidationError("netspec: dropout must be in [0,1)");
      width = d->out;
    } else if (const auto* c = std::get_if<Conv3dSpec>(&l)) {
      if (width >= 0 && width != c->in_ch) throw ValidationError("netspec: conv width mismatch");
      width = c->out_ch;
    } else if (const auto* r = std::get_if<ResBlock3dSpec>(&l)) {
      if (width >= 0 && width != r->in_ch)
        throw ValidationError("netspec: res block width mismatch");
      width = r->out_ch;
    } else if (std::holds_alternative<ConcatLatentSpec>(l)) {
      if (width < 0) throw ValidationError("netspec: concat before any layer");
      width += spec.latent_dim;
    }
    // pools keep the width
  }
}

// ---- parameter container & generic forward ---------------------------------------

template <typename S>
struct Net {
  NetSpec spec;
  std::vector<Tensor<S>> params;  // flattened, names identify layers

  // weights trainable by default; freeze() makes inference-only copies cheap
  void set_trainable(bool trainable) {
    for (auto& p : params) {
      p->requires_grad = trainable;
      if (trainable) p->ensure_grad();
    }
  }
};

template <typename S>
void kaiming_init(Tensor<S>& w, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& x : w->val) x = static_cast<S>(u(rng));
}

template <typename S>
Net<S> build_net(const NetSpec& spec, uint64_t init_seed) {
  validate_netspec(spec);
  Net<S> net;
  net.spec = spec;
  auto rng = seeded_rng(init_seed, "net-init");
  int li = 0;
  for (const auto& l : spec.layers) {
    const std::string prefix = "layer" + std::to_string(li);
    if (const auto* d = std::get_if<DenseSpec>(&l)) {
      auto w = ad::make_tensor<S>({d->out, d->in}, true);
      kaiming_init(w, d->in, rng);
      auto b = ad::make_tensor<S>({d->out}, true);
      if (d->weight_norm) {
        // g initialized to ||v_row|| so the initial effective weight equals v
        auto g = ad::make_tensor<S>({d->out}, true);
        for (int o = 0; o < d->out; ++o) {
          S nrm2 = S(0);
          for (int p = 0; p < d->in; ++p) nrm2 += w->val[o * d->in + p] * w->val[o * d->in + p];
          g->val[o] = std::sqrt(nrm2);
        }
        w->name = prefix + ".v";
        g->name = prefix + ".g";
        b->name = prefix + ".b";
        net.params.push_back(w);
        net.params.push_back(g);
        net.params.push_back(b);
      } else {
        w->name = prefix + ".w";
        b->name = prefix + ".b";
        net.params.push_back(w);
        net.params.push_back(b);
      }
    } else if (const auto* c = std::get_if<Conv3dSpec>(&l)) {
      auto w = ad::make_tensor<S>({c->out_ch, c->in_ch, c->kernel, c->kernel, c->kernel}, true);
      kaiming_init(w, c->in_ch * c->kernel * c->kernel * c->kernel, rng);
      auto b = ad::make_tensor<S>({c->out_ch}, true);
      w->name = prefix + ".w";
      b->name = prefix + ".b";
      net.params.push_back(w);
      net.params.push_back(b);
    } else if (const auto* r = std::get_if<ResBlock3dSpec>(&l)) {
      auto w1 = ad::make_tensor<S>({r->out_ch, r->in_ch, 3, 3, 3}, true);
      kaiming_init(w1, r->in_ch * 27, rng);
      auto b1 = ad::make_tensor<S>({r->out_ch}, true);
      auto w2 = ad::make_tensor<S>({r->out_ch, r->out_ch, 3, 3, 3}, true);
      kaiming_init(w2, r->out_ch * 27, rng);
      auto b2 = ad::make_tensor<S>({r->out_ch}, true);
      w1->name = prefix + ".w1";
      b1->name = prefix + ".b1";
      w2->name = prefix + ".w2";
      b2->name = prefix + ".b2";
      net.params.push_back(w1);
      net.params.push_back(b1);
      net.params.push_back(w2);
      net.params.push_back(b2);
      if (r->in_ch != r->out_ch) {
        auto wp = ad::make_tensor<S>({r->out_ch, r->in_ch, 1, 1, 1}, true);
        kaiming_init(wp, r->in_ch, rng);
        auto bp = ad::make_tensor<S>({r->out_ch}, true);
        wp->name = prefix + ".wproj";
        bp->name = prefix + ".bproj";
        net.params.push_back(wp);
        net.params.push_back(bp);
      }
    }
    ++li;
  }
  return net;
}

template <typename S>
Tensor<S> forward(const Net<S>& net, Tensor<S> x, bool train, uint64_t seed);

// Runs the layer stack. `latent` feeds the concat_latent layer (dense nets);
// dropout draws from (seed, layer index) and is active only in train mode.
template <typename S>
Tensor<S> forward(const Net<S>& net, Tensor<S> x, const Tensor<S>& latent, bool train,
                  uint64_t seed) {
  size_t pi = 0;
  int li = 0;
  auto take = [&](int n) {
    if (pi + n > net.params.size()) throw std::runtime_error("forward: parameter underrun");
    pi += n;
    return pi - n;
  };
  for (const auto& l : net.spec.layers) {
    if (const auto* d = std::get_if<DenseSpec>(&l)) {
      if (d->weight_norm) {
        size_t base = take(3);
        x = weightnorm_linear(x, net.params[base], net.params[base + 1], net.params[base + 2]);
      } else {
        size_t base = take(2);
        x = linear(x, net.params[base], net.params[base + 1]);
      }
      if (d->relu) x = relu(x);
      if (d->dropout_p > 0.0) x = dropout(x, d->dropout_p, train, mix_seed(seed, 1000 + li));
    } else if (const auto* c = std::get_if<Conv3dSpec>(&l)) {
      size_t base = take(2);
      x = conv3d(x, net.params[base], net.params[base + 1], c->stride, c->pad);
      if (c->relu) x = relu(x);
    } else if (const auto* r = std::get_if<ResBlock3dSpec>(&l)) {
      size_t base = take(4);
      auto h = conv3d(x, net.params[base], net.params[base + 1], 1, 1);
      h = relu(h);
      h = conv3d(h, net.params[base + 2], net.params[base + 3], 1, 1);
      Tensor<S> skip = x;
      if (r->in_ch != r->out_ch) {
        size_t pbase = take(2);
        skip = conv3d(x, net.params[pbase], net.params[pbase + 1], 1, 0);
      }
      x = relu(add(h, skip));
    } else if (std::holds_alternative<MaxPool3dSpec>(l)) {
      x = max_pool3d(x);
    } else if (std::holds_alternative<GlobalAvgPoolSpec>(l)) {
      x = global_avg_pool(x);
    } else {  // concat_latent
      if (!latent) throw ValidationError("forward: net expects a latent input");
      if (latent->numel() != net.spec.latent_dim)
        throw ValidationError("forward: latent length mismatch");
      Tensor<S> lat2d = latent;
      if (latent->shape.size() == 1) lat2d = ad::tile_rows(latent, x->shape[0]);
      x = ad::concat_cols(x, lat2d);
    }
    ++li;
  }
  return x;
}

template <typename S>
Tensor<S> forward(const Net<S>& net, Tensor<S> x, bool train, uint64_t seed) {
  return forward(net, std::move(x), Tensor<S>{}, train, seed);
}

// ---- Adam with decoupled weight decay ----------------------------------------------

template <typename S>
struct AdamState {
  struct Slot {
    std::vector<S> m, v;
  };
  std::vector<Slot> slots;
  int64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <typename S>
void adam_step(std::vector<Tensor<S>>& params, AdamState<S>& state, double lr,
               double weight_decay) {
  if (!(lr > 0.0)) throw ValidationError("adam_step: lr must be positive");
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m.assign(params[i]->val.size(), S(0));
      state.slots[i].v.assign(params[i]->val.size(), S(0));
    }
  }
  if (state.slots.size() != params.size())
    throw ValidationError("adam_step: state/parameter count mismatch");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& slot = state.slots[i];
    if (p.grad.size() != p.val.size()) continue;
    for (size_t j = 0; j < p.val.size(); ++j) {
      const double g = static_cast<double>(p.grad[j]);
      if (!std::isfinite(g))
        throw std::runtime_error("adam_step: non-finite gradient in tensor '" + p.name + "'");
      double m = state.beta1 * slot.m[j] + (1.0 - state.beta1) * g;
      double v = state.beta2 * slot.v[j] + (1.0 - state.beta2) * g * g;
      slot.m[j] = static_cast<S>(m);
      slot.v[j] = static_cast<S>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double w = static_cast<double>(p.val[j]);
      w -= lr * weight_decay * w;  // decoupled decay
      w -= lr * mhat / (std::sqrt(vhat) + state.eps);
      p.val[j] = static_cast<S>(w);
    }
  }
}

template <typename S>
void zero_grads(std::vector<Tensor<S>>& params) {
  for (auto& p : params) p->zero_grad();
}

// ---- checkpoints -------------------------------------------------------------------

struct TensorBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

// manifest json + binary blob: per tensor (u32 name length, name bytes,
// u32 ndim, u32 dims..., f32le data) in manifest order.
inline void save_checkpoint(const std::string& stem, nlohmann::json manifest,
                            const std::vector<TensorBlob>& tensors) {
  nlohmann::json tlist = nlohmann::json::array();
  std::string blob;
  auto put_u32 = [&blob](uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    blob.append(b, 4);
  };
  for (const auto& t : tensors) {
    int64_t n = 1;
    for (int d : t.shape) n *= d;
    if (n != static_cast<int64_t>(t.data.size()))
      throw ValidationError("checkpoint tensor '" + t.name + "': shape/data mismatch");
    tlist.push_back({{"name", t.name}, {"shape", t.shape}});
    put_u32(static_cast<uint32_t>(t.name.size()));
    blob.append(t.name);
    put_u32(static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(static_cast<uint32_t>(d));
    blob.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  manifest["format"] = "issm-checkpoint-v1";
  manifest["tensors"] = tlist;
  write_file_atomic(stem + ".bin", blob.data(), blob.size());
  write_file_atomic(stem + ".json", manifest.dump(2) + "\n");
}

inline std::pair<nlohmann::json, std::vector<TensorBlob>> load_checkpoint(
    const std::string& stem) {
  nlohmann::json manifest;
  {
    std::ifstream f(stem + ".json");
    if (!f) throw std::runtime_error("missing checkpoint: " + stem + ".json");
    f >> manifest;
  }
  auto raw = read_file_bytes(stem + ".bin");
  std::vector<TensorBlob> tensors;
  size_t off = 0;
  auto get_u32 = [&raw, &off]() {
    if (off + 4 > raw.size()) throw std::runtime_error("checkpoint blob truncated");
    uint32_t v;
    std::memcpy(&v, raw.data() + off, 4);
    off += 4;
    return v;
  };
  for (const auto& entry : manifest.at("tensors")) {
    TensorBlob t;
    uint32_t name_len = get_u32();
    if (off + name_len > raw.size()) throw std::runtime_error("checkpoint blob truncated");
    t.name.assign(raw.data() + off, name_len);
    off += name_len;
    if (t.name != entry.at("name").get<std::string>())
      throw std::runtime_error("checkpoint order mismatch at tensor '" + t.name + "'");
    uint32_t ndim = get_u32();
    int64_t n = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      t.shape.push_back(static_cast<int>(get_u32()));
      n *= t.shape.back();
    }
    if (off + n * sizeof(float) > raw.size()) throw std::runtime_error("checkpoint blob truncated");
    t.data.resize(static_cast<size_t>(n));
    std::memcpy(t.data.data(), raw.data() + off, n * sizeof(float));
    off += n * sizeof(float);
    tensors.push_back(std::move(t));
  }
  return {manifest, tensors};
}

template <typename S>
std::vector<TensorBlob> net_tensors(const Net<S>& net) {
  std::vector<TensorBlob> out;
  for (const auto& p : net.params) {
    TensorBlob t;
    t.name = p->name;
    t.shape = p->shape;
    t.data.reserve(p->val.size());
    for (S v : p->val) t.data.push_back(static_cast<float>(v));
    out.push_back(std::move(t));
  }
  return out;
}

template <typename S>
void load_net_tensors(Net<S>& net, const std::vector<TensorBlob>& tensors) {
  size_t ti = 0;
  for (auto& p : net.params) {
    while (ti < tensors.size() && tensors[ti].name != p->name) ++ti;
    if (ti == tensors.size())
      throw std::runtime_error("checkpoint missing tensor '" + p->name + "'");
    const auto& t = tensors[ti];
    if (t.shape != p->shape)
      throw std::runtime_error("checkpoint shape mismatch for tensor '" + p->name + "'");
    for (size_t i = 0; i < p->val.size(); ++i) p->val[i] = static_cast<S>(t.data[i]);
    ++ti;
  }
}

}  // namespace issm::nn
