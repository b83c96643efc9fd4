#pragma once

// The implicit shape auto-decoder f(x~, z): joint training of MLP weights
// and one latent code per training shape, SDF queries, grid rasterization
// through a pose and canonical frame, and iso-surface extraction.

#include <map>

#include "issm/mesh.hpp"
#include "issm/nn.hpp"
#include "issm/sampling.hpp"
#include "issm/shape_space.hpp"

namespace issm {

struct DecoderConfig {
  int width = 128;       // hidden width (512 at paper scale)
  int depth = 8;         // dense layers, latent injected at the 4th
  int latent_dim = 256;
  double dropout = 0.2;
  double sigma = 100.0;  // zero-mean Gaussian prior strength
  int iterations = 2000;
  int samples_per_iter = 30000;  // per shape per iteration
  double lr_latent = 0.001;
  double lr_weights = 0.0005;
  double weight_decay = 0.0001;
  int lr_drop_iteration = -1;  // -1: halfway
  double latent_init_std = 0.01;
  uint64_t seed = 0;
};

inline nn::NetSpec decoder_netspec(int width, int depth, int latent_dim, double dropout) {
  if (depth < 5) throw ValidationError("decoder needs at least 5 layers");
  nn::NetSpec spec;
  spec.latent_dim = latent_dim;
  spec.layers.push_back(nn::DenseSpec{3, width, true, dropout, true});
  for (int i = 1; i < 3; ++i) spec.layers.push_back(nn::DenseSpec{width, width, true, dropout, true});
  spec.layers.push_back(nn::ConcatLatentSpec{});
  spec.layers.push_back(nn::DenseSpec{width + latent_dim, width, true, dropout, true});
  for (int i = 4; i < depth - 1; ++i)
    spec.layers.push_back(nn::DenseSpec{width, width, true, dropout, true});
  spec.layers.push_back(nn::DenseSpec{width, 1, true, 0.0, false});
  return spec;
}

template <typename S>
struct DecoderModel {
  nn::Net<S> net;
  int latent_dim = 0;
  double sigma = 100.0;
  std::vector<std::string> shape_ids;                    // training order
  std::map<std::string, std::vector<S>> latents;         // shape id -> code
  int trained_iterations = 0;
  bool frozen = false;

  const std::vector<S>& latent(const std::string& id) const {
    auto it = latents.find(id);
    if (it == latents.end()) throw ValidationError("unknown shape id: " + id);
    return it->second;
  }

  void freeze() {
    net.set_trainable(false);
    frozen = true;
  }
};

// Joint minimization of sum_k [ sum_i L1(f(x_i, z_k), s_i) + ||z_k||^2 / sigma^2 ]
// over weights and latents; per iteration each shape contributes an equal
// positive/negative batch; no loss clamping; two Adam streams (latents and
// weights) with the lr/10 drop at the scheduled iteration.
template <typename S = float>
DecoderModel<S> train_decoder(const std::vector<SdfSampleSet>& samples, const DecoderConfig& cfg,
                              const std::function<void(int, double)>& progress = nullptr) {
  if (samples.empty()) throw ValidationError("train_decoder: no shapes");
  struct ShapeData {
    std::string id;
    const SdfSampleSet* set;
    std::vector<int> pos, neg;
  };
  std::vector<ShapeData> shapes;
  for (const auto& set : samples) {
    if (set.frame != SampleFrame::canonical)
      throw ValidationError("train_decoder: samples must be canonical");
    if (set.pairs.empty()) throw ValidationError("train_decoder: empty sample set");
    ShapeData sd;
    sd.id = set.shape_id;
    sd.set = &set;
    for (int i = 0; i < static_cast<int>(set.pairs.size()); ++i)
      (set.pairs[i].value < 0 ? sd.neg : sd.pos).push_back(i);
    if (sd.pos.empty() || sd.neg.empty())
      throw ValidationError("train_decoder: shape '" + sd.id +
                            "' lacks positive or negative samples");
    shapes.push_back(std::move(sd));
  }

  DecoderModel<S> model;
  model.latent_dim = cfg.latent_dim;
  model.sigma = cfg.sigma;
  model.net = nn::build_net<S>(decoder_netspec(cfg.width, cfg.depth, cfg.latent_dim, cfg.dropout),
                               mix_seed(cfg.seed, fnv1a64("decoder-init")));

  auto init_rng = seeded_rng(cfg.seed, "latent-init");
  std::normal_distribution<double> gauss(0.0, cfg.latent_init_std);
  std::vector<ad::Tensor<S>> latent_params;
  for (const auto& sd : shapes) {
    auto z = ad::make_tensor<S>({cfg.latent_dim}, true);
    for (auto& v : z->val) v = static_cast<S>(gauss(init_rng));
    z->name = "latent/" + sd.id;
    model.shape_ids.push_back(sd.id);
    latent_params.push_back(z);
  }

  nn::AdamState<S> weight_state;
  std::vector<nn::AdamState<S>> latent_states(shapes.size());

  const int drop_at = cfg.lr_drop_iteration > 0 ? cfg.lr_drop_iteration : cfg.iterations / 2;
  const int half = std::max(1, cfg.samples_per_iter / 2);
  const S prior_w = static_cast<S>(1.0 / (cfg.sigma * cfg.sigma));

  auto rng = seeded_rng(cfg.seed, "decoder-train");
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const double lr_scale = iter >= drop_at ? 0.1 : 1.0;
    double iter_loss = 0.0;
    for (size_t k = 0; k < shapes.size(); ++k) {
      const auto& sd = shapes[k];
      const int n = 2 * half;
      auto x = ad::make_tensor<S>({n, 3});
      auto target = ad::make_tensor<S>({n, 1});
      std::uniform_int_distribution<size_t> pick_pos(0, sd.pos.size() - 1);
      std::uniform_int_distribution<size_t> pick_neg(0, sd.neg.size() - 1);
      for (int i = 0; i < n; ++i) {
        int idx = i < half ? sd.pos[pick_pos(rng)] : sd.neg[pick_neg(rng)];
        const auto& pair = sd.set->pairs[idx];
        for (int c = 0; c < 3; ++c) x->val[i * 3 + c] = static_cast<S>(pair.x[c]);
        target->val[i] = static_cast<S>(pair.value);
      }
      auto pred = nn::forward(model.net, x, latent_params[k], /*train=*/true,
                              mix_seed(cfg.seed, iter * 1315423911ULL + k));
      auto data_term = ad::mean(ad::abs(ad::sub(pred, target)));
      auto prior = ad::scale(ad::sum(ad::square(latent_params[k])), prior_w);
      auto loss = ad::add(data_term, prior);
      nn::zero_grads(model.net.params);
      latent_params[k]->zero_grad();
      ad::backward(loss);
      nn::adam_step(model.net.params, weight_state, cfg.lr_weights * lr_scale,
                    cfg.weight_decay);
      std::vector<ad::Tensor<S>> zonly{latent_params[k]};
      nn::adam_step(zonly, latent_states[k], cfg.lr_latent * lr_scale, 0.0);
      iter_loss += loss->val[0];
    }
    if (progress) progress(iter, iter_loss / shapes.size());
  }

  for (size_t k = 0; k < shapes.size(); ++k)
    model.latents[shapes[k].id] = std::vector<S>(latent_params[k]->val.begin(),
                                                 latent_params[k]->val.end());
  model.trained_iterations = cfg.iterations;
  return model;
}

// Eval-mode forward for a batch of canonical points; returns scaled values.
template <typename S>
std::vector<double> decode_batch(const DecoderModel<S>& model, const std::vector<Vec3>& pts,
                                 const std::vector<S>& z) {
  if (static_cast<int>(z.size()) != model.latent_dim)
    throw ValidationError("decode: latent length mismatch");
  const int n = static_cast<int>(pts.size());
  auto x = ad::make_tensor<S>({n, 3});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) x->val[i * 3 + c] = static_cast<S>(pts[i][c]);
  auto zt = ad::constant<S>({model.latent_dim}, z);
  auto out = nn::forward(model.net, x, zt, /*train=*/false, 0);
  std::vector<double> vals(n);
  for (int i = 0; i < n; ++i) vals[i] = static_cast<double>(out->val[i]);
  return vals;
}

template <typename S>
double decode(const DecoderModel<S>& model, const Vec3& x, const std::vector<S>& z) {
  return decode_batch(model, std::vector<Vec3>{x}, z)[0];
}

// Evaluate f(A^-1 T(pose) x, z) at every voxel center; outputs are scaled
// back to mm via 2 * (canonical scale of A). Voxels far outside the unit
// sphere (cull_radius) skip the network and get a positive far-field value.
template <typename S>
VoxelSdf rasterize(const DecoderModel<S>& model, const std::vector<S>& z,
                   const CanonicalFrame& frame, const RigidPose& pose, std::array<int, 3> dims,
                   std::array<double, 3> spacing, std::array<double, 3> origin,
                   double cull_radius = 1.5, int chunk = 32768) {
  frame.validate();
  // stored values are canonical distance * kCanonicalValueScale (=1/2);
  // canonical distance maps to mm through the frame's isotropic scale
  const double value_to_mm = frame.scale() / kCanonicalValueScale;
  VoxelSdf out;
  out.vol = make_volume(dims, spacing, origin, VolumeKind::sdf);
  out.band_mm = 2.0 * frame.scale();

  Mat4 to_canon = frame.affine.inverse() * pose.inverse_matrix();
  const int64_t total = out.vol.voxel_count();
  std::vector<Vec3> pts;
  std::vector<int64_t> idxs;
  pts.reserve(chunk);
  idxs.reserve(chunk);

  auto flush = [&]() {
    if (pts.empty()) return;
    auto vals = decode_batch(model, pts, z);
    for (size_t i = 0; i < pts.size(); ++i)
      out.vol.data[idxs[i]] = static_cast<float>(vals[i] * value_to_mm);
    pts.clear();
    idxs.clear();
  };

  for (int64_t li = 0; li < total; ++li) {
    int x = static_cast<int>(li % dims[0]);
    int y = static_cast<int>((li / dims[0]) % dims[1]);
    int zz = static_cast<int>(li / (static_cast<int64_t>(dims[0]) * dims[1]));
    auto c = out.vol.voxel_center(x, y, zz);
    Vec3 xt = (to_canon * Vec3(c[0], c[1], c[2]).homogeneous()).head<3>();
    const double r = xt.norm();
    if (r > cull_radius) {
      out.vol.data[li] = static_cast<float>((r - 1.0) * frame.scale());
      continue;
    }
    pts.push_back(xt);
    idxs.push_back(li);
    if (static_cast<int>(pts.size()) >= chunk) flush();
  }
  flush();
  return out;
}

inline Mesh extract_isosurface(const VoxelSdf& sdf) {
  Mesh m = marching_cubes(sdf.vol, 0.0);
  m.frame = MeshFrame::pixel_mm;
  return m;
}

// ---------------------------------------------------------------------------
// Decoder checkpoints: net weights + the latent table (and optionally the
// fitted shape space) as named tensors.
// ---------------------------------------------------------------------------

template <typename S>
void save_decoder(const DecoderModel<S>& model, const ShapeSpace* space,
                  const std::string& stem, uint64_t seed) {
  nlohmann::json manifest;
  manifest["stage"] = "decoder";
  manifest["arch"] = nn::netspec_to_json(model.net.spec);
  manifest["latent_dim"] = model.latent_dim;
  manifest["sigma"] = model.sigma;
  manifest["step_count"] = model.trained_iterations;
  manifest["rng_seed"] = seed;
  manifest["optimizer_state"] = false;
  manifest["shape_ids"] = model.shape_ids;

  auto tensors = nn::net_tensors(model.net);
  for (const auto& id : model.shape_ids) {
    nn::TensorBlob t;
    t.name = "latent/" + id;
    t.shape = {model.latent_dim};
    const auto& z = model.latent(id);
    t.data.assign(z.begin(), z.end());
    tensors.push_back(std::move(t));
  }
  if (space) {
    nn::TensorBlob mean{"space/mean", {space->latent_dim()}, {}};
    for (int i = 0; i < space->latent_dim(); ++i)
      mean.data.push_back(static_cast<float>(space->mean[i]));
    nn::TensorBlob basis{"space/basis", {space->latent_dim(), space->n_components()}, {}};
    for (int r = 0; r < space->latent_dim(); ++r)
      for (int c = 0; c < space->n_components(); ++c)
        basis.data.push_back(static_cast<float>(space->basis(r, c)));
    nn::TensorBlob var{"space/variances", {space->n_components()}, {}};
    for (int i = 0; i < space->n_components(); ++i)
      var.data.push_back(static_cast<float>(space->variances[i]));
    manifest["explained_variance"] = space->explained_variance;
    tensors.push_back(std::move(mean));
    tensors.push_back(std::move(basis));
    tensors.push_back(std::move(var));
  }
  nn::save_checkpoint(stem, manifest, tensors);
}

template <typename S = float>
std::pair<DecoderModel<S>, std::unique_ptr<ShapeSpace>> load_decoder(const std::string& stem) {
  auto [manifest, tensors] = nn::load_checkpoint(stem);
  DecoderModel<S> model;
  model.net = nn::build_net<S>(nn::netspec_from_json(manifest.at("arch")), 0);
  nn::load_net_tensors(model.net, tensors);
  model.latent_dim = manifest.at("latent_dim").get<int>();
  model.sigma = manifest.at("sigma").get<double>();
  model.trained_iterations = manifest.at("step_count").get<int>();
  for (const auto& id : manifest.at("shape_ids")) model.shape_ids.push_back(id);
  std::unique_ptr<ShapeSpace> space;
  std::map<std::string, const nn::TensorBlob*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (const auto& id : model.shape_ids) {
    auto it = by_name.find("latent/" + id);
    if (it == by_name.end()) throw std::runtime_error("checkpoint missing latent for " + id);
    model.latents[id] = std::vector<S>(it->second->data.begin(), it->second->data.end());
  }
  if (by_name.count("space/mean")) {
    space = std::make_unique<ShapeSpace>();
    const auto& mean = *by_name["space/mean"];
    const auto& basis = *by_name["space/basis"];
    const auto& var = *by_name["space/variances"];
    space->mean.resize(mean.shape[0]);
    for (int i = 0; i < mean.shape[0]; ++i) space->mean[i] = mean.data[i];
    space->basis.resize(basis.shape[0], basis.shape[1]);
    for (int r = 0; r < basis.shape[0]; ++r)
      for (int c = 0; c < basis.shape[1]; ++c)
        space->basis(r, c) = basis.data[r * basis.shape[1] + c];
    space->variances.resize(var.shape[0]);
    for (int i = 0; i < var.shape[0]; ++i) space->variances[i] = var.data[i];
    space->explained_variance = manifest.value("explained_variance", 0.0);
  }
  return {std::move(model), std::move(space)};
}

}  // namespace issm
