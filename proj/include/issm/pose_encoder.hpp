#pragma once

// The correction-predicting pose encoder and its staged (marginal space)
// training: inverted episodic loops with random pose perturbations, a frozen
// decoder supplying the loss, and full chained inference.

#include "issm/decoder.hpp"
#include "issm/pose.hpp"
#include "issm/shape_space.hpp"

namespace issm {

// Which pose parameters each stage's correction may touch (Table-1 column).
struct FreeParams {
  bool t = false, s = false, b = false, lambda = false;
};

inline FreeParams stage_free_params(Stage stage) {
  switch (stage) {
    case Stage::translation: return {true, false, false, false};
    case Stage::scale: return {true, true, false, false};
    case Stage::rotation: return {true, true, true, false};
    case Stage::nonrigid: return {true, true, true, true};
  }
  return {};
}

struct StageConfig {
  Stage stage = Stage::translation;
  int episode_length = 7;  // T: 7 for translation, 15 otherwise
  int epochs = 10;
  int samples_per_step = 512;
  PerturbationSchedule perturbation;
  std::array<int, 3> grid_dims{64, 64, 64};
  std::array<double, 3> grid_spacing{4.0, 4.0, 4.0};
  bool crop_per_shape = false;  // translation: fixed grid; later stages: crop
  std::map<std::string, RigidPose> init_poses;
  double lr = 0.001;
  double weight_decay = 0.0001;
  int lr_drop_epoch = -1;  // -1: two thirds in
  double scale_penalty_weight = 1.0;
  double image_lo = 0.0, image_hi = 1.0;  // intensity normalization window
  uint64_t seed = 0;

  void validate() const {
    if (episode_length < 1) throw ValidationError("stage config: episode length must be >= 1");
    if (epochs < 1) throw ValidationError("stage config: epochs must be >= 1");
    perturbation.validate();
  }
};

inline StageConfig default_stage_config(Stage stage) {
  StageConfig cfg;
  cfg.stage = stage;
  cfg.episode_length = stage == Stage::translation ? 7 : 15;
  cfg.perturbation = default_schedule(stage);
  if (stage == Stage::translation) {
    cfg.grid_dims = {64, 64, 64};
    cfg.grid_spacing = {4.0, 4.0, 4.0};
    cfg.crop_per_shape = false;
  } else {
    cfg.grid_dims = {48, 48, 48};
    cfg.grid_spacing = {2.0, 2.0, 2.0};
    cfg.crop_per_shape = true;
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Encoder: residual conv trunk with max pools and global average pooling,
// plus parallel zero-initialized heads for t, s, b and the PCA loadings.
// ---------------------------------------------------------------------------

template <typename S>
struct PoseEncoder {
  nn::Net<S> trunk;
  ad::Tensor<S> head_w[4];  // t, s, b, lambda weights [out, feature]
  ad::Tensor<S> head_b[4];
  int feature_dim = 0;
  int n_components = 0;
  double t_scale = 10.0;  // mm per raw translation-head unit

  std::vector<ad::Tensor<S>> params() const {
    std::vector<ad::Tensor<S>> out = trunk.params;
    for (int h = 0; h < 4; ++h) {
      out.push_back(head_w[h]);
      out.push_back(head_b[h]);
    }
    return out;
  }
};

inline nn::NetSpec encoder_trunk_spec(int base_channels, int feature_dim) {
  const int c = base_channels;
  nn::NetSpec spec;
  spec.layers = {
      nn::Conv3dSpec{2, c, 3, 2, 1, true},  // stem at half resolution
      nn::MaxPool3dSpec{},
      nn::ResBlock3dSpec{c, 2 * c},
      nn::MaxPool3dSpec{},
      nn::ResBlock3dSpec{2 * c, 4 * c},
      nn::MaxPool3dSpec{},
      nn::ResBlock3dSpec{4 * c, feature_dim},
      nn::ResBlock3dSpec{feature_dim, feature_dim},
      nn::MaxPool3dSpec{},
      nn::GlobalAvgPoolSpec{},
  };
  return spec;
}

template <typename S = float>
PoseEncoder<S> build_pose_encoder(int base_channels, int feature_dim, int n_components,
                                  uint64_t seed) {
  PoseEncoder<S> enc;
  enc.trunk = nn::build_net<S>(encoder_trunk_spec(base_channels, feature_dim), seed);
  enc.feature_dim = feature_dim;
  enc.n_components = n_components;
  const int head_sizes[4] = {3, 3, 6, std::max(1, n_components)};
  const char* head_names[4] = {"head_t", "head_s", "head_b", "head_lambda"};
  for (int h = 0; h < 4; ++h) {
    enc.head_w[h] = ad::make_tensor<S>({head_sizes[h], feature_dim}, true);  // zero init
    enc.head_b[h] = ad::make_tensor<S>({head_sizes[h]}, true);
    enc.head_w[h]->name = std::string(head_names[h]) + ".w";
    enc.head_b[h]->name = std::string(head_names[h]) + ".b";
  }
  return enc;
}

// ---------------------------------------------------------------------------
// encoder_step: one correction prediction. Returns the differentiable pieces
// (composed pose tensors, loadings) plus the plain-value correction pose.
// ---------------------------------------------------------------------------

// Rasterized mean-shape SDF in anchor space, computed once per stage
// resolution and re-posed by trilinear resampling every step.
struct MeanSdfCache {
  VoxelSdf sdf;
  double norm_scale = 1.0;  // divide mm values by this for the input channel
};

template <typename S>
MeanSdfCache make_mean_sdf_cache(const DecoderModel<S>& model, const Eigen::VectorXd& mean_latent,
                                 const CanonicalFrame& frame, double spacing,
                                 double margin = 1.35) {
  std::vector<S> z(mean_latent.size());
  for (int i = 0; i < mean_latent.size(); ++i) z[i] = static_cast<S>(mean_latent[i]);
  const double half = frame.scale() * margin;
  const int n = std::max(8, static_cast<int>(std::ceil(2.0 * half / spacing)));
  Vec3 c = frame.center();
  std::array<double, 3> origin{c[0] - 0.5 * (n - 1) * spacing, c[1] - 0.5 * (n - 1) * spacing,
                               c[2] - 0.5 * (n - 1) * spacing};
  MeanSdfCache cache;
  cache.sdf = rasterize(model, z, frame, identity_pose(c), {n, n, n},
                        {spacing, spacing, spacing}, origin);
  cache.norm_scale = 2.0 * frame.scale();
  return cache;
}

template <typename S>
struct EncoderStepResult {
  ad::Tensor<S> t;        // composed pose pieces (differentiable)
  ad::Tensor<S> s;
  ad::Tensor<S> rot;      // [3,3]
  ad::Tensor<S> lambda;   // loadings (nonrigid stages)
  RigidPose delta;        // plain correction values
  RigidPose composed;     // delta applied to the input pose (plain values)
};

// Normalized image channel for a stage grid.
inline std::vector<float> normalize_image_channel(const Volume& grid_image, double lo,
                                                  double hi) {
  std::vector<float> out(grid_image.data.size());
  const double span = hi - lo;
  for (size_t i = 0; i < out.size(); ++i) {
    double v = (std::min(hi, std::max(lo, static_cast<double>(grid_image.data[i]))) - lo) / span;
    out[i] = static_cast<float>(v - 0.5);
  }
  return out;
}

template <typename S>
EncoderStepResult<S> encoder_step(const PoseEncoder<S>& enc, const Volume& grid_image,
                                  const std::vector<float>& image_channel,
                                  const MeanSdfCache& mean_sdf, const RigidPose& prev,
                                  Stage stage, bool train, uint64_t step_seed) {
  const auto [nx, ny, nz] = grid_image.dims;
  if (static_cast<size_t>(nx) * ny * nz != image_channel.size())
    throw ValidationError("encoder_step: image channel / grid mismatch");

  auto input = ad::make_tensor<S>({2, nz, ny, nx});
  const int64_t vox = static_cast<int64_t>(nx) * ny * nz;
  for (int64_t i = 0; i < vox; ++i) input->val[i] = static_cast<S>(image_channel[i]);
  // channel 2: mean-shape SDF re-posed by the previous pose estimate
  Mat4 to_anchor = prev.inverse_matrix();
  const double far = mean_sdf.norm_scale;
  parallel_for(0, nz, [&](int64_t z) {
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        auto c = grid_image.voxel_center(static_cast<int>(x), y, static_cast<int>(z));
        Vec3 a = (to_anchor * Vec3(c[0], c[1], c[2]).homogeneous()).head<3>();
        double v = sample_trilinear(mean_sdf.sdf.vol, a[0], a[1], a[2], far);
        double n = std::clamp(v / mean_sdf.norm_scale, -1.5, 1.5);
        input->val[vox + (static_cast<int64_t>(z) * ny + y) * nx + x] = static_cast<S>(n);
      }
  });

  auto feat = nn::forward(enc.trunk, input, train, step_seed);
  auto feat_row = ad::reshape(feat, {1, enc.feature_dim});

  const FreeParams free = stage_free_params(stage);
  auto head = [&](int h) {
    return ad::reshape(nn::linear(feat_row, enc.head_w[h], enc.head_b[h]),
                       {h == 3 ? std::max(1, enc.n_components) : enc.head_w[h]->shape[0]});
  };

  std::vector<S> mask_t(3, free.t ? S(1) : S(0));
  std::vector<S> mask_s(3, free.s ? S(1) : S(0));
  std::vector<S> mask_b(6, free.b ? S(1) : S(0));

  auto raw_t = ad::mul(head(0), ad::constant<S>({3}, mask_t));
  auto raw_s = ad::mul(head(1), ad::constant<S>({3}, mask_s));
  auto raw_b = ad::mul(head(2), ad::constant<S>({6}, mask_b));
  auto lambda = head(3);

  auto delta_t = ad::scale(raw_t, static_cast<S>(enc.t_scale));
  auto delta_s = ad::exp(raw_s);  // exp keeps scales positive; raw 0 -> 1
  std::vector<S> id6{1, 0, 0, 0, 1, 0};
  auto b6 = ad::add(ad::constant<S>({6}, id6), raw_b);  // deviation from identity
  // Gram-Schmidt on the tape
  auto a1 = ad::slice_flat(b6, 0, 3);
  auto a2 = ad::slice_flat(b6, 3, 3);
  auto inv_n1 = ad::reciprocal(ad::sqrt(ad::sum(ad::square(a1))));
  auto c1 = ad::mul_scalar_tensor(a1, inv_n1);
  auto dot = ad::sum(ad::mul(c1, a2));
  auto r = ad::sub(a2, ad::mul_scalar_tensor(c1, dot));
  auto inv_n2 = ad::reciprocal(ad::sqrt(ad::sum(ad::square(r))));
  auto c2 = ad::mul_scalar_tensor(r, inv_n2);
  auto c3 = ad::cross3(c1, c2);
  auto rot_delta = ad::stack_cols3(c1, c2, c3);

  // compose with the (constant) previous pose, component-wise
  std::vector<S> tprev{static_cast<S>(prev.t[0]), static_cast<S>(prev.t[1]),
                       static_cast<S>(prev.t[2])};
  std::vector<S> sprev{static_cast<S>(prev.s[0]), static_cast<S>(prev.s[1]),
                       static_cast<S>(prev.s[2])};
  Mat3 rp = prev.rotation();
  std::vector<S> rprev(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rprev[i * 3 + j] = static_cast<S>(rp(i, j));

  EncoderStepResult<S> out;
  out.t = ad::add(delta_t, ad::constant<S>({3}, tprev));
  out.s = ad::mul(delta_s, ad::constant<S>({3}, sprev));
  out.rot = ad::matmul(rot_delta, ad::constant<S>({3, 3}, rprev));
  out.lambda = lambda;

  // plain-value correction (double arithmetic, stored for replay)
  out.delta = identity_pose(prev.center);
  for (int i = 0; i < 3; ++i) {
    out.delta.t[i] = static_cast<double>(delta_t->val[i]);
    out.delta.s[i] = static_cast<double>(delta_s->val[i]);
  }
  Vec6 b6d;
  for (int i = 0; i < 6; ++i) b6d[i] = static_cast<double>(b6->val[i]);
  out.delta.b = matrix_to_rot6d(rot6d_to_matrix(b6d));
  out.composed = compose(out.delta, prev);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable loss for one step: the frozen decoder evaluated at
// A^-1 T(omega) x_i against the sampled SDF targets (values scaled to the
// canonical [-1,1] units), plus the stage extras.
// ---------------------------------------------------------------------------

template <typename S>
ad::Tensor<S> pose_step_loss(const DecoderModel<S>& decoder, const CanonicalFrame& frame,
                             const EncoderStepResult<S>& step, const ShapeSpace* space,
                             const std::vector<SdfSample>& batch, Stage stage,
                             double scale_penalty_weight, double* data_term_out = nullptr) {
  const int n = static_cast<int>(batch.size());
  const double s_a = frame.scale();
  Vec3 c_a = frame.center();

  auto X = ad::make_tensor<S>({n, 3});
  auto target = ad::make_tensor<S>({n, 1});
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 3; ++k) X->val[i * 3 + k] = static_cast<S>(batch[i].x[k]);
    target->val[i] = static_cast<S>(batch[i].value / (2.0 * s_a));
  }

  // pixel -> anchor: c + S^-1 R^T (x - c - t); rows: ((X - (c+t)) R) / s + c
  std::vector<S> center{static_cast<S>(step.composed.center[0]),
                        static_cast<S>(step.composed.center[1]),
                        static_cast<S>(step.composed.center[2])};
  auto ct = ad::add(step.t, ad::constant<S>({3}, center));
  auto u = ad::matmul(ad::sub_rowvec(X, ct), step.rot);
  auto v = ad::mul_colwise(u, ad::reciprocal(step.s));
  auto anchor_pts = ad::add_rowvec(v, ad::constant<S>({3}, center));
  // A^-1 for the isotropic frame: (w - c_A) / s_A
  std::vector<S> ca{static_cast<S>(c_a[0]), static_cast<S>(c_a[1]), static_cast<S>(c_a[2])};
  auto canon = ad::scale(ad::sub_rowvec(anchor_pts, ad::constant<S>({3}, ca)),
                         static_cast<S>(1.0 / s_a));

  ad::Tensor<S> z;
  if (stage == Stage::nonrigid) {
    if (!space) throw ValidationError("pose_step_loss: nonrigid stage needs a shape space");
    const int d = space->latent_dim(), m = space->n_components();
    std::vector<S> w(static_cast<size_t>(d) * m), mu(d);
    for (int r = 0; r < d; ++r) {
      mu[r] = static_cast<S>(space->mean[r]);
      for (int cc = 0; cc < m; ++cc) w[r * m + cc] = static_cast<S>(space->basis(r, cc));
    }
    auto wl = ad::matmul(ad::constant<S>({d, m}, w), ad::reshape(step.lambda, {m, 1}));
    z = ad::add(ad::constant<S>({d}, mu), ad::reshape(wl, {d}));
  } else {
    if (!space) throw ValidationError("pose_step_loss: stage needs the mean latent");
    std::vector<S> mu(space->latent_dim());
    for (int r = 0; r < space->latent_dim(); ++r) mu[r] = static_cast<S>(space->mean[r]);
    z = ad::constant<S>({space->latent_dim()}, mu);
  }

  auto pred = nn::forward(decoder.net, canon, z, /*train=*/false, 0);
  auto loss = ad::mean(ad::abs(ad::sub(pred, target)));
  if (data_term_out) *data_term_out = static_cast<double>(loss->val[0]);

  if (stage == Stage::nonrigid) {
    const S prior_w = static_cast<S>(1.0 / (decoder.sigma * decoder.sigma));
    loss = ad::add(loss, ad::scale(ad::sum(ad::square(z)), prior_w));
  }
  const FreeParams free = stage_free_params(stage);
  if (free.s && scale_penalty_weight > 0.0) {
    auto over = ad::relu(ad::add_scalar(step.s, S(-2)));
    auto under = ad::relu(ad::scale(ad::add_scalar(step.s, S(-0.5)), S(-1)));
    loss = ad::add(loss, ad::scale(ad::sum(ad::add(over, under)),
                                   static_cast<S>(scale_penalty_weight)));
  }
  return loss;
}

}  // namespace issm
