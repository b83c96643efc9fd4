#pragma once

// Constrained deep level-set refinement: the three-term narrow-band loss
// (iso-boundary match via a smoothed Dirac, eikonal penalty, bounded
// deviation) and a small 3D U-Net producing the residual field r.

#include "issm/decoder.hpp"
#include "issm/distance.hpp"
#include "issm/msl.hpp"

namespace issm {

struct RefineConfig {
  double band_mm = 25.0;    // Omega_b half-width
  double rho_mm = 12.0;     // deviation margin
  double epsilon_mm = 0.0;  // Dirac width; <=0 selects 1.5 * min spacing
  double lambda1 = 1.0;
  double lambda2 = 0.1;
  int sdf_pool_size = 10;
  double latent_noise_std = 0.01;
  // training
  int epochs = 12;
  double lr = 0.001;
  double weight_decay = 0.0001;
  int unet_channels = 8;
  double out_scale_mm = 4.0;  // mm per raw network output unit
  double jitter_trans_mm = 2.0;
  double jitter_rot_deg = 2.0;
  uint64_t seed = 0;

  void validate() const {
    if (!(band_mm > rho_mm && rho_mm > 0.0))
      throw ValidationError("refine config requires band > rho > 0");
    if (lambda1 < 0.0 || lambda2 < 0.0)
      throw ValidationError("refine config: weights must be non-negative");
    if (sdf_pool_size < 1) throw ValidationError("refine config: pool size must be >= 1");
  }
  double epsilon(const std::array<double, 3>& spacing) const {
    if (epsilon_mm > 0.0) return epsilon_mm;
    return 1.5 * std::min({spacing[0], spacing[1], spacing[2]});
  }
};

// Cauchy kernel delta approximation: (1/pi) * eps / (eps^2 + x^2).
inline double dirac_eps(double x, double eps) {
  if (!(eps > 0.0)) throw ValidationError("dirac_eps: eps must be positive");
  return eps / (M_PI * (eps * eps + x * x));
}

// ---------------------------------------------------------------------------
// Spatial gradient op: central differences inside, one-sided at the edges
// (exact for linear fields); returns [3, D, H, W].
// ---------------------------------------------------------------------------

namespace ad_ops {

template <typename S>
ad::Tensor<S> grad3d(const ad::Tensor<S>& u, std::array<double, 3> spacing) {
  if (u->shape.size() != 3) throw ValidationError("grad3d: need [D,H,W]");
  const int D = u->shape[0], H = u->shape[1], W = u->shape[2];
  const int64_t vox = static_cast<int64_t>(D) * H * W;
  const int n[3] = {W, H, D};  // per-axis lengths in x,y,z order
  const auto idx = [=](int z, int y, int x) {
    return (static_cast<int64_t>(z) * H + y) * W + x;
  };

  // axis a entry: list of (coefficient, source offset) pairs per location
  auto out = ad::detail::make_op<S>(
      {3, D, H, W}, {u}, [=](ad::Node<S>& self) {
        for (int axis = 0; axis < 3; ++axis) {
          const S inv_h = static_cast<S>(1.0 / spacing[axis]);
          const int len = n[axis];
          for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
              for (int x = 0; x < W; ++x) {
                const int c[3] = {x, y, z};
                const int64_t oi = axis * vox + idx(z, y, x);
                const S g = self.grad[oi];
                if (g == S(0)) continue;
                int lo[3] = {x, y, z}, hi[3] = {x, y, z};
                S coeff;
                if (len == 1) continue;
                if (c[axis] == 0) {
                  hi[axis] += 1;
                  coeff = inv_h;
                } else if (c[axis] == len - 1) {
                  lo[axis] -= 1;
                  coeff = inv_h;
                } else {
                  lo[axis] -= 1;
                  hi[axis] += 1;
                  coeff = inv_h * S(0.5);
                }
                u->grad[idx(hi[2], hi[1], hi[0])] += g * coeff;
                u->grad[idx(lo[2], lo[1], lo[0])] -= g * coeff;
              }
        }
      });

  for (int axis = 0; axis < 3; ++axis) {
    const S inv_h = static_cast<S>(1.0 / spacing[axis]);
    const int len = n[axis];
    for (int z = 0; z < D; ++z)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const int c[3] = {x, y, z};
          const int64_t oi = axis * vox + idx(z, y, x);
          if (len == 1) {
            out->val[oi] = S(0);
            continue;
          }
          int lo[3] = {x, y, z}, hi[3] = {x, y, z};
          S coeff;
          if (c[axis] == 0) {
            hi[axis] += 1;
            coeff = inv_h;
          } else if (c[axis] == len - 1) {
            lo[axis] -= 1;
            coeff = inv_h;
          } else {
            lo[axis] -= 1;
            hi[axis] += 1;
            coeff = inv_h * S(0.5);
          }
          out->val[oi] = coeff * (u->val[idx(hi[2], hi[1], hi[0])] -
                                  u->val[idx(lo[2], lo[1], lo[0])]);
        }
  }
  return out;
}

}  // namespace ad_ops

// ---------------------------------------------------------------------------
// The three-term loss. r enters masked to the band, so values outside the
// band can never affect the loss (band-restriction invariant).
// ---------------------------------------------------------------------------

struct RefineLossBreakdown {
  double total = 0.0;
  double term_boundary = 0.0;  // sqrt(gt^2 * dirac(u))
  double term_eikonal = 0.0;   // lambda1 (|grad u| - 1)^2
  double term_margin = 0.0;    // lambda2 max(0, |r| - rho)
  int64_t band_voxels = 0;
};

template <typename S>
std::pair<ad::Tensor<S>, RefineLossBreakdown> refinement_loss_t(
    const VoxelSdf& gt, const VoxelSdf& sdf_lambda, const ad::Tensor<S>& r,
    const RefineConfig& cfg) {
  cfg.validate();
  const Volume& g = gt.vol;
  const Volume& s = sdf_lambda.vol;
  if (g.dims != s.dims || g.spacing != s.spacing || g.origin != s.origin)
    throw ValidationError("refinement_loss: grid mismatch");
  const int64_t vox = static_cast<int64_t>(g.dims[0]) * g.dims[1] * g.dims[2];
  if (r->numel() != vox) throw ValidationError("refinement_loss: r field grid mismatch");

  RefineLossBreakdown br;
  std::vector<S> mask(vox), svals(vox), g2(vox);
  for (int64_t i = 0; i < vox; ++i) {
    const bool in_band = std::abs(s.data[i]) <= cfg.band_mm;
    mask[i] = in_band ? S(1) : S(0);
    if (in_band) ++br.band_voxels;
    svals[i] = static_cast<S>(s.data[i]);
    g2[i] = static_cast<S>(static_cast<double>(g.data[i]) * g.data[i]);
  }
  const std::vector<int> grid_shape{g.dims[2], g.dims[1], g.dims[0]};  // [D,H,W]
  auto mask_t = ad::constant<S>(grid_shape, mask);
  auto s_t = ad::constant<S>(grid_shape, svals);
  auto g2_t = ad::constant<S>(grid_shape, g2);

  auto r_flat = ad::reshape(r, grid_shape);
  auto r_band = ad::mul(r_flat, mask_t);
  auto u = ad::add(s_t, r_band);

  const double eps = cfg.epsilon(g.spacing);
  // dirac(u) = (eps/pi) / (u^2 + eps^2)
  auto dirac = ad::scale(ad::reciprocal(ad::add_scalar(ad::square(u), static_cast<S>(eps * eps))),
                         static_cast<S>(eps / M_PI));
  auto term1 = ad::sum(ad::mul(mask_t, ad::sqrt(ad::mul(g2_t, dirac))));

  auto grads = ad_ops::grad3d(u, g.spacing);
  auto gx = ad::slice_flat(ad::square(grads), 0, static_cast<int>(vox));
  auto gy = ad::slice_flat(ad::square(grads), static_cast<int>(vox), static_cast<int>(vox));
  auto gz = ad::slice_flat(ad::square(grads), 2 * static_cast<int>(vox), static_cast<int>(vox));
  auto norm = ad::sqrt(ad::add(ad::add(gx, gy), gz));
  auto eik = ad::square(ad::add_scalar(norm, S(-1)));
  auto term2 = ad::sum(ad::mul(ad::reshape(mask_t, {static_cast<int>(vox)}), eik));

  auto excess = ad::relu(ad::add_scalar(ad::abs(r_band), static_cast<S>(-cfg.rho_mm)));
  auto term3 = ad::sum(ad::mul(mask_t, excess));

  auto total = ad::add(term1, ad::add(ad::scale(term2, static_cast<S>(cfg.lambda1)),
                                      ad::scale(term3, static_cast<S>(cfg.lambda2))));
  br.term_boundary = static_cast<double>(term1->val[0]);
  br.term_eikonal = cfg.lambda1 * static_cast<double>(term2->val[0]);
  br.term_margin = cfg.lambda2 * static_cast<double>(term3->val[0]);
  br.total = static_cast<double>(total->val[0]);
  return {total, br};
}

inline RefineLossBreakdown refinement_loss(const VoxelSdf& gt, const VoxelSdf& sdf_lambda,
                                           const Volume& r, const RefineConfig& cfg) {
  if (r.dims != sdf_lambda.vol.dims)
    throw ValidationError("refinement_loss: grid mismatch");
  std::vector<double> rv(r.data.begin(), r.data.end());
  auto rt = ad::constant<double>({r.dims[2], r.dims[1], r.dims[0]}, rv);
  return refinement_loss_t(gt, sdf_lambda, rt, cfg).second;
}

// ---------------------------------------------------------------------------
// 3-level U-Net residual refiner, two input channels (image, SDF), one
// output channel (r). The output conv starts at zero so the initial
// refinement is the identity.
// ---------------------------------------------------------------------------

template <typename S>
struct RefinerModel {
  // enc0: 2->c, c->c | enc1: c->2c, 2c->2c | bottleneck: 2c->4c, 4c->4c
  // up1: (4c+2c)->2c, 2c->2c | up0: (2c+c)->c, c->c | out: c->1 (zero init)
  std::vector<ad::Tensor<S>> params;
  int channels = 8;
  double out_scale_mm = 4.0;
  double sdf_norm_mm = 1.0;   // divide SDF channel values by this
  double image_lo = 0.0, image_hi = 1.0;

  std::vector<ad::Tensor<S>>& all_params() { return params; }
};

template <typename S = float>
RefinerModel<S> build_refiner(int channels, uint64_t seed) {
  RefinerModel<S> m;
  m.channels = channels;
  auto rng = seeded_rng(seed, "refiner-init");
  auto conv = [&](int ci, int co, const std::string& name, bool zero = false) {
    auto w = ad::make_tensor<S>({co, ci, 3, 3, 3}, true);
    if (!zero) nn::kaiming_init(w, ci * 27, rng);
    auto b = ad::make_tensor<S>({co}, true);
    w->name = name + ".w";
    b->name = name + ".b";
    m.params.push_back(w);
    m.params.push_back(b);
  };
  const int c = channels;
  conv(2, c, "enc0a");
  conv(c, c, "enc0b");
  conv(c, 2 * c, "enc1a");
  conv(2 * c, 2 * c, "enc1b");
  conv(2 * c, 4 * c, "bota");
  conv(4 * c, 4 * c, "botb");
  conv(6 * c, 2 * c, "up1a");
  conv(2 * c, 2 * c, "up1b");
  conv(3 * c, c, "up0a");
  conv(c, c, "up0b");
  conv(c, 1, "out", /*zero=*/true);
  return m;
}

template <typename S>
ad::Tensor<S> refiner_forward(const RefinerModel<S>& m, const ad::Tensor<S>& input) {
  for (int a = 1; a < 4; ++a)
    if (input->shape[a] % 4 != 0)
      throw ValidationError("refiner: grid dims must be divisible by 4");
  auto conv = [&](const ad::Tensor<S>& x, int i, bool act = true) {
    auto y = nn::conv3d(x, m.params[2 * i], m.params[2 * i + 1], 1, 1);
    return act ? ad::relu(y) : y;
  };
  auto e0 = conv(conv(input, 0), 1);
  auto e1 = conv(conv(nn::max_pool3d(e0), 2), 3);
  auto b = conv(conv(nn::max_pool3d(e1), 4), 5);
  auto u1 = conv(conv(nn::concat_channels(nn::upsample_nearest2(b), e1), 6), 7);
  auto u0 = conv(conv(nn::concat_channels(nn::upsample_nearest2(u1), e0), 8), 9);
  return conv(u0, 10, /*act=*/false);
}

// Residual field r (mm) for an image + SDF pair on one grid.
template <typename S>
Volume predict_residual(const RefinerModel<S>& m, const Volume& image, const VoxelSdf& sdf) {
  if (image.dims != sdf.vol.dims) throw ValidationError("refiner: grid mismatch");
  const auto [nx, ny, nz] = image.dims;
  const int64_t vox = static_cast<int64_t>(nx) * ny * nz;
  auto input = ad::make_tensor<S>({2, nz, ny, nx});
  const double span = m.image_hi - m.image_lo;
  for (int64_t i = 0; i < vox; ++i) {
    double v = (std::min(m.image_hi, std::max(m.image_lo,
                                              static_cast<double>(image.data[i]))) -
                m.image_lo) / span;
    input->val[i] = static_cast<S>(v - 0.5);
    input->val[vox + i] =
        static_cast<S>(std::clamp(sdf.vol.data[i] / m.sdf_norm_mm, -1.5, 1.5));
  }
  auto r = refiner_forward(m, input);
  Volume out = image;
  out.kind = VolumeKind::image;
  for (int64_t i = 0; i < vox; ++i)
    out.data[i] = static_cast<float>(static_cast<double>(r->val[i]) * m.out_scale_mm);
  return out;
}

// Apply the refiner: residual added inside the band of the (reinitialized)
// input SDF; voxels outside the band are returned untouched.
template <typename S>
VoxelSdf refine_sdf(const RefinerModel<S>& m, const Volume& image, const VoxelSdf& sdf_lambda,
                    const RefineConfig& cfg) {
  VoxelSdf s0 = reinitialize_sdf(sdf_lambda);
  Volume r = predict_residual(m, image, s0);
  VoxelSdf out = s0;
  for (size_t i = 0; i < out.vol.data.size(); ++i)
    if (std::abs(s0.vol.data[i]) <= cfg.band_mm) out.vol.data[i] += r.data[i];
  return out;
}

// ---------------------------------------------------------------------------
// Refiner training: per case an SDF pool of latent-noise variants (each
// reinitialized), per iteration one random variant with a small independent
// rigid jitter on the SDF channel.
// ---------------------------------------------------------------------------

struct RefineCase {
  std::string shape_id;
  Volume image;        // crop grid
  VoxelSdf gt_sdf;     // same grid
  RigidPose pose;      // non-rigid stage estimate
  Eigen::VectorXd loadings;
};

template <typename S>
struct RefinerTrainResult {
  double first_epoch_loss = 0.0;
  double last_epoch_loss = 0.0;
};

template <typename S>
RefinerTrainResult<S> train_refiner(RefinerModel<S>& refiner,
                                    const std::vector<RefineCase>& cases,
                                    const DecoderModel<S>& decoder, const CanonicalFrame& frame,
                                    const ShapeSpace& space, const RefineConfig& cfg,
                                    const std::function<void(int, double)>& progress = nullptr) {
  cfg.validate();
  if (cases.empty()) throw ValidationError("train_refiner: empty pool");
  refiner.sdf_norm_mm = 2.0 * frame.scale();

  // pre-generate the SDF pools
  std::vector<std::vector<VoxelSdf>> pools(cases.size());
  for (size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& c = cases[ci];
    Eigen::VectorXd z0 = latent_from_loadings(space, c.loadings);
    for (int v = 0; v < cfg.sdf_pool_size; ++v) {
      Eigen::VectorXd z = perturb_latent(z0, cfg.latent_noise_std,
                                         mix_seed(cfg.seed, ci * 977 + v));
      std::vector<S> zs(z.size());
      for (int i = 0; i < z.size(); ++i) zs[i] = static_cast<S>(z[i]);
      VoxelSdf raw = rasterize(decoder, zs, frame, c.pose, c.image.dims, c.image.spacing,
                               c.image.origin);
      raw.band_mm = cfg.band_mm;
      pools[ci].push_back(reinitialize_sdf(raw));
    }
  }

  auto params = refiner.all_params();
  nn::AdamState<S> opt;
  RefinerTrainResult<S> result;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (size_t ci = 0; ci < cases.size(); ++ci) {
      const auto& c = cases[ci];
      auto rng = seeded_rng(mix_seed(cfg.seed, epoch * 7919 + ci), c.shape_id);
      std::uniform_int_distribution<int> pick(0, cfg.sdf_pool_size - 1);
      const VoxelSdf& variant = pools[ci][pick(rng)];

      // independent small rigid jitter of the SDF channel
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      RigidPose jitter = identity_pose(c.pose.apply(frame.center()));
      for (int a = 0; a < 3; ++a)
        jitter.t[a] = (2.0 * u01(rng) - 1.0) * cfg.jitter_trans_mm;
      double ang = (2.0 * u01(rng) - 1.0) * cfg.jitter_rot_deg * M_PI / 180.0;
      Vec3 axis(u01(rng) - 0.5, u01(rng) - 0.5, u01(rng) - 0.5);
      if (axis.norm() > 1e-9)
        jitter.b = matrix_to_rot6d(Eigen::AngleAxisd(ang, axis.normalized()).toRotationMatrix());
      VoxelSdf jittered = variant;
      Mat4 inv = jitter.inverse_matrix();
      const double far = 2.0 * frame.scale();
      for (int z = 0; z < variant.vol.dims[2]; ++z)
        for (int y = 0; y < variant.vol.dims[1]; ++y)
          for (int x = 0; x < variant.vol.dims[0]; ++x) {
            auto p = variant.vol.voxel_center(x, y, z);
            Vec3 q = (inv * Vec3(p[0], p[1], p[2]).homogeneous()).head<3>();
            jittered.vol.at(x, y, z) =
                static_cast<float>(sample_trilinear(variant.vol, q[0], q[1], q[2], far));
          }

      // forward, loss normalized per band voxel for stable lr
      const auto [nx, ny, nz] = c.image.dims;
      const int64_t vox = static_cast<int64_t>(nx) * ny * nz;
      auto input = ad::make_tensor<S>({2, nz, ny, nx});
      const double span = refiner.image_hi - refiner.image_lo;
      for (int64_t i = 0; i < vox; ++i) {
        double v = (std::min(refiner.image_hi,
                             std::max(refiner.image_lo,
                                      static_cast<double>(c.image.data[i]))) -
                    refiner.image_lo) / span;
        input->val[i] = static_cast<S>(v - 0.5);
        input->val[vox + i] =
            static_cast<S>(std::clamp(jittered.vol.data[i] / refiner.sdf_norm_mm, -1.5, 1.5));
      }
      auto r_raw = refiner_forward(refiner, input);
      auto r_mm = ad::scale(ad::reshape(r_raw, {nz, ny, nx}),
                            static_cast<S>(refiner.out_scale_mm));
      auto [loss_sum, br] = refinement_loss_t(c.gt_sdf, jittered, r_mm, cfg);
      auto loss = ad::scale(loss_sum, static_cast<S>(1.0 / std::max<int64_t>(1, br.band_voxels)));
      nn::zero_grads(params);
      ad::backward(loss);
      nn::adam_step(params, opt, cfg.lr, cfg.weight_decay);
      epoch_loss += br.total / std::max<int64_t>(1, br.band_voxels);
    }
    epoch_loss /= static_cast<double>(cases.size());
    if (epoch == 0) result.first_epoch_loss = epoch_loss;
    if (epoch == cfg.epochs - 1) result.last_epoch_loss = epoch_loss;
    if (progress) progress(epoch, epoch_loss);
  }
  return result;
}

// Refiner checkpoints (common format, stage tag "refine").
template <typename S>
void save_refiner(const RefinerModel<S>& m, const std::string& stem, uint64_t seed) {
  nlohmann::json manifest;
  manifest["stage"] = "refine";
  manifest["channels"] = m.channels;
  manifest["out_scale_mm"] = m.out_scale_mm;
  manifest["sdf_norm_mm"] = m.sdf_norm_mm;
  manifest["image_lo"] = m.image_lo;
  manifest["image_hi"] = m.image_hi;
  manifest["rng_seed"] = seed;
  manifest["optimizer_state"] = false;
  manifest["step_count"] = 0;
  std::vector<nn::TensorBlob> tensors;
  for (const auto& p : m.params) {
    nn::TensorBlob t;
    t.name = p->name;
    t.shape = p->shape;
    t.data.assign(p->val.begin(), p->val.end());
    tensors.push_back(std::move(t));
  }
  nn::save_checkpoint(stem, manifest, tensors);
}

template <typename S = float>
RefinerModel<S> load_refiner(const std::string& stem) {
  auto [manifest, tensors] = nn::load_checkpoint(stem);
  RefinerModel<S> m = build_refiner<S>(manifest.at("channels").get<int>(), 0);
  m.out_scale_mm = manifest.at("out_scale_mm").get<double>();
  m.sdf_norm_mm = manifest.at("sdf_norm_mm").get<double>();
  m.image_lo = manifest.at("image_lo").get<double>();
  m.image_hi = manifest.at("image_hi").get<double>();
  size_t ti = 0;
  for (auto& p : m.params) {
    if (ti >= tensors.size() || tensors[ti].name != p->name)
      throw std::runtime_error("refiner checkpoint tensor mismatch");
    for (size_t i = 0; i < p->val.size(); ++i) p->val[i] = static_cast<S>(tensors[ti].data[i]);
    ++ti;
  }
  return m;
}

}  // namespace issm
