#pragma once

// Marginal-space-learning orchestration: inverted episodic training of one
// stage encoder, stage checkpoints with stored pose tables, and the chained
// translation -> scale -> rotation -> non-rigid inference.

#include "issm/pose_encoder.hpp"

namespace issm {

struct PoseTrainingCase {
  std::string shape_id;
  const Volume* image = nullptr;          // original image grid
  const SdfSampleSet* samples = nullptr;  // pixel-frame coordinate/SDF pairs
};

struct StageTrainResult {
  std::map<std::string, RigidPose> final_poses;
  // last-epoch correction log per shape: (eta, delta) per episode step
  std::map<std::string, std::vector<std::pair<RigidPose, RigidPose>>> replay;
  double first_step_data_loss = 0.0;  // mean L1 at tau=1, last epoch
  double last_step_data_loss = 0.0;   // mean L1 at tau=T, last epoch
};

namespace detail {

// stage grid for one case: fixed physical window for the translation stage,
// crop centered on the placed mean shape afterwards
inline Volume stage_grid_image(const Volume& image, const StageConfig& cfg,
                               const RigidPose& init_pose, const CanonicalFrame& frame,
                               double fill) {
  std::array<double, 3> origin;
  if (cfg.crop_per_shape) {
    Vec3 c = init_pose.apply(frame.center());
    for (int a = 0; a < 3; ++a)
      origin[a] = c[a] - 0.5 * (cfg.grid_dims[a] - 1) * cfg.grid_spacing[a];
  } else {
    auto c = image.physical_center();
    for (int a = 0; a < 3; ++a)
      origin[a] = c[a] - 0.5 * (cfg.grid_dims[a] - 1) * cfg.grid_spacing[a];
  }
  return resample(image, cfg.grid_dims, cfg.grid_spacing, origin, fill);
}

}  // namespace detail

// Inverted episodic training: the episode step is the outer loop, shapes the
// inner loop; each epoch replays episodes from the stage's init poses with
// fresh perturbations, and every shape's pose is stored back after its step.
template <typename S>
StageTrainResult train_stage(PoseEncoder<S>& enc, const std::vector<PoseTrainingCase>& data,
                             const StageConfig& cfg, const DecoderModel<S>& decoder,
                             const CanonicalFrame& frame, const ShapeSpace& space,
                             const std::function<void(int, double)>& progress = nullptr) {
  cfg.validate();
  if (!decoder.frozen) throw ValidationError("train_stage: decoder must be frozen");
  if (data.empty()) throw ValidationError("train_stage: no training cases");
  for (const auto& d : data)
    if (!cfg.init_poses.count(d.shape_id))
      throw ValidationError("train_stage: missing init pose for shape " + d.shape_id);

  MeanSdfCache mean_sdf =
      make_mean_sdf_cache(decoder, space.mean, frame, cfg.grid_spacing[0]);

  // per-shape stage grids and normalized channels
  std::vector<Volume> grids;
  std::vector<std::vector<float>> channels;
  for (const auto& d : data) {
    grids.push_back(detail::stage_grid_image(*d.image, cfg, cfg.init_poses.at(d.shape_id),
                                             frame, cfg.image_lo));
    channels.push_back(normalize_image_channel(grids.back(), cfg.image_lo, cfg.image_hi));
  }

  auto params = enc.params();
  nn::AdamState<S> opt;
  const int drop_epoch = cfg.lr_drop_epoch >= 0 ? cfg.lr_drop_epoch : (2 * cfg.epochs) / 3;

  StageTrainResult result;
  std::map<std::string, RigidPose> poses;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool last_epoch = epoch == cfg.epochs - 1;
    const double lr = epoch >= drop_epoch ? cfg.lr * 0.1 : cfg.lr;
    if (last_epoch) result.replay.clear();
    for (const auto& d : data) poses[d.shape_id] = cfg.init_poses.at(d.shape_id);
    double tau_first = 0.0, tau_last = 0.0;

    for (int tau = 1; tau <= cfg.episode_length; ++tau) {
      double tau_loss = 0.0;
      for (size_t k = 0; k < data.size(); ++k) {
        const auto& d = data[k];
        auto rng = seeded_rng(mix_seed(cfg.seed, (static_cast<uint64_t>(epoch) << 32) ^
                                                     (static_cast<uint64_t>(tau) << 16) ^ k),
                              d.shape_id);
        RigidPose eta;
        RigidPose perturbed = perturb_pose(poses[d.shape_id], cfg.perturbation, rng, &eta);

        auto step = encoder_step(enc, grids[k], channels[k], mean_sdf, perturbed, cfg.stage,
                                 /*train=*/true, rng());

        std::vector<SdfSample> batch(cfg.samples_per_step);
        std::uniform_int_distribution<size_t> pick(0, d.samples->pairs.size() - 1);
        for (auto& b : batch) b = d.samples->pairs[pick(rng)];

        double data_term = 0.0;
        auto loss = pose_step_loss(decoder, frame, step, &space, batch, cfg.stage,
                                   cfg.scale_penalty_weight, &data_term);
        if (!std::isfinite(static_cast<double>(loss->val[0])))
          throw std::runtime_error("train_stage: non-finite loss at stage " +
                                   to_string(cfg.stage) + " epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(tau));
        nn::zero_grads(params);
        ad::backward(loss);
        nn::adam_step(params, opt, lr, cfg.weight_decay);

        poses[d.shape_id] = step.composed;
        tau_loss += data_term;
        if (last_epoch) result.replay[d.shape_id].push_back({eta, step.delta});
      }
      tau_loss /= static_cast<double>(data.size());
      if (tau == 1) tau_first = tau_loss;
      if (tau == cfg.episode_length) tau_last = tau_loss;
      if (progress) progress(epoch * cfg.episode_length + tau, tau_loss);
    }
    if (last_epoch) {
      result.first_step_data_loss = tau_first;
      result.last_step_data_loss = tau_last;
    }
  }
  result.final_poses = poses;
  return result;
}

// ---------------------------------------------------------------------------
// Stage checkpoints
// ---------------------------------------------------------------------------

template <typename S>
void save_stage_checkpoint(const PoseEncoder<S>& enc, const StageConfig& cfg,
                           const std::map<std::string, RigidPose>& stored_poses,
                           const RigidPose& init_pose_mean, const std::string& stem) {
  nlohmann::json manifest;
  manifest["stage"] = to_string(cfg.stage);
  manifest["arch"] = nn::netspec_to_json(enc.trunk.spec);
  manifest["feature_dim"] = enc.feature_dim;
  manifest["n_components"] = enc.n_components;
  manifest["t_scale"] = enc.t_scale;
  manifest["episode_length"] = cfg.episode_length;
  manifest["grid_dims"] = cfg.grid_dims;
  manifest["grid_spacing"] = cfg.grid_spacing;
  manifest["crop_per_shape"] = cfg.crop_per_shape;
  manifest["image_lo"] = cfg.image_lo;
  manifest["image_hi"] = cfg.image_hi;
  manifest["step_count"] = cfg.epochs * cfg.episode_length;
  manifest["rng_seed"] = cfg.seed;
  manifest["optimizer_state"] = false;
  manifest["init_pose_mean"] = pose_to_json(init_pose_mean);
  nlohmann::json poses = nlohmann::json::object();
  for (const auto& [id, p] : stored_poses) poses[id] = pose_to_json(p);
  manifest["stored_poses"] = poses;

  auto tensors = nn::net_tensors(enc.trunk);
  for (int h = 0; h < 4; ++h) {
    for (const auto& t : {enc.head_w[h], enc.head_b[h]}) {
      nn::TensorBlob blob;
      blob.name = t->name;
      blob.shape = t->shape;
      blob.data.assign(t->val.begin(), t->val.end());
      tensors.push_back(std::move(blob));
    }
  }
  nn::save_checkpoint(stem, manifest, tensors);
}

template <typename S = float>
struct StageCheckpoint {
  PoseEncoder<S> encoder;
  StageConfig config;
  std::map<std::string, RigidPose> stored_poses;
  RigidPose init_pose_mean;
};

template <typename S = float>
StageCheckpoint<S> load_stage_checkpoint(const std::string& stem) {
  auto [manifest, tensors] = nn::load_checkpoint(stem);
  StageCheckpoint<S> out;
  out.config = default_stage_config(stage_from_string(manifest.at("stage")));
  out.config.episode_length = manifest.at("episode_length").get<int>();
  for (int a = 0; a < 3; ++a) {
    out.config.grid_dims[a] = manifest.at("grid_dims").at(a).get<int>();
    out.config.grid_spacing[a] = manifest.at("grid_spacing").at(a).get<double>();
  }
  out.config.crop_per_shape = manifest.at("crop_per_shape").get<bool>();
  out.config.image_lo = manifest.at("image_lo").get<double>();
  out.config.image_hi = manifest.at("image_hi").get<double>();
  out.config.seed = manifest.at("rng_seed").get<uint64_t>();

  out.encoder.trunk = nn::build_net<S>(nn::netspec_from_json(manifest.at("arch")), 0);
  out.encoder.feature_dim = manifest.at("feature_dim").get<int>();
  out.encoder.n_components = manifest.at("n_components").get<int>();
  out.encoder.t_scale = manifest.at("t_scale").get<double>();
  const int head_sizes[4] = {3, 3, 6, std::max(1, out.encoder.n_components)};
  const char* head_names[4] = {"head_t", "head_s", "head_b", "head_lambda"};
  for (int h = 0; h < 4; ++h) {
    out.encoder.head_w[h] = ad::make_tensor<S>({head_sizes[h], out.encoder.feature_dim}, true);
    out.encoder.head_b[h] = ad::make_tensor<S>({head_sizes[h]}, true);
    out.encoder.head_w[h]->name = std::string(head_names[h]) + ".w";
    out.encoder.head_b[h]->name = std::string(head_names[h]) + ".b";
  }
  nn::load_net_tensors(out.encoder.trunk, tensors);
  std::map<std::string, const nn::TensorBlob*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  for (int h = 0; h < 4; ++h) {
    for (auto* t : {&out.encoder.head_w[h], &out.encoder.head_b[h]}) {
      auto it = by_name.find((*t)->name);
      if (it == by_name.end())
        throw std::runtime_error("stage checkpoint missing tensor " + (*t)->name);
      for (size_t i = 0; i < (*t)->val.size(); ++i)
        (*t)->val[i] = static_cast<S>(it->second->data[i]);
    }
  }
  out.init_pose_mean = pose_from_json(manifest.at("init_pose_mean"));
  for (auto& [id, pj] : manifest.at("stored_poses").items())
    out.stored_poses[id] = pose_from_json(pj);
  return out;
}

template <typename S>
void copy_encoder_weights(const PoseEncoder<S>& from, PoseEncoder<S>& to) {
  if (from.trunk.params.size() != to.trunk.params.size())
    throw ValidationError("copy_encoder_weights: architecture mismatch");
  for (size_t i = 0; i < from.trunk.params.size(); ++i)
    to.trunk.params[i]->val = from.trunk.params[i]->val;
  for (int h = 0; h < 4; ++h) {
    to.head_w[h]->val = from.head_w[h]->val;
    to.head_b[h]->val = from.head_b[h]->val;
  }
}

// ---------------------------------------------------------------------------
// Inference: chain the stage encoders, each initialized from the previous
// stage's final pose, running fixed-length episodes without perturbations.
// ---------------------------------------------------------------------------

template <typename S = float>
struct MslModels {
  const DecoderModel<S>* decoder = nullptr;
  CanonicalFrame frame;
  ShapeSpace space;
  std::map<Stage, StageCheckpoint<S>> stages;
};

struct InferenceResult {
  RigidPose final_pose;
  Eigen::VectorXd loadings;
  VoxelSdf sdf_lambda;
  std::map<std::string, RigidPose> stage_poses;  // pose after each stage
  Vec3 first_translation_delta = Vec3::Zero();
};

template <typename S>
InferenceResult run_msl_inference(const Volume& image, const MslModels<S>& models,
                                  std::array<int, 3> out_dims, std::array<double, 3> out_spacing,
                                  std::array<double, 3> out_origin) {
  for (Stage st : {Stage::translation, Stage::scale, Stage::rotation, Stage::nonrigid})
    if (!models.stages.count(st))
      throw std::runtime_error("run_msl_inference: missing stage checkpoint: " + to_string(st));

  InferenceResult res;
  RigidPose pose = models.stages.at(Stage::translation).init_pose_mean;
  Eigen::VectorXd lambda = Eigen::VectorXd::Zero(models.space.n_components());

  std::map<double, MeanSdfCache> caches;  // keyed by stage spacing
  for (Stage st : {Stage::translation, Stage::scale, Stage::rotation, Stage::nonrigid}) {
    const auto& ck = models.stages.at(st);
    const StageConfig& cfg = ck.config;
    if (!caches.count(cfg.grid_spacing[0]))
      caches.emplace(cfg.grid_spacing[0],
                     make_mean_sdf_cache(*models.decoder, models.space.mean, models.frame,
                                         cfg.grid_spacing[0]));
    const MeanSdfCache& cache = caches.at(cfg.grid_spacing[0]);
    Volume grid = detail::stage_grid_image(image, cfg, pose, models.frame, cfg.image_lo);
    auto channel = normalize_image_channel(grid, cfg.image_lo, cfg.image_hi);
    for (int tau = 1; tau <= cfg.episode_length; ++tau) {
      auto step = encoder_step(ck.encoder, grid, channel, cache, pose, cfg.stage,
                               /*train=*/false, 0);
      if (st == Stage::translation && tau == 1) res.first_translation_delta = step.delta.t;
      pose = step.composed;
      if (st == Stage::nonrigid) {
        for (int i = 0; i < lambda.size(); ++i)
          lambda[i] = static_cast<double>(step.lambda->val[i]);
      }
    }
    res.stage_poses[to_string(st)] = pose;
  }

  res.final_pose = pose;
  res.loadings = lambda;
  Eigen::VectorXd z = latent_from_loadings(models.space, lambda);
  std::vector<S> zs(z.size());
  for (int i = 0; i < z.size(); ++i) zs[i] = static_cast<S>(z[i]);
  res.sdf_lambda = rasterize(*models.decoder, zs, models.frame, pose, out_dims, out_spacing,
                             out_origin);
  return res;
}

}  // namespace issm
