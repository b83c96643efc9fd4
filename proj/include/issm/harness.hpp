#pragma once

// Experiment harness: a run directory of file-based stages
// (synth -> prep -> decoder -> pca -> pose stages -> refine -> eval), each
// reading its inputs from disk so stages can be re-run individually and the
// whole pipeline is reproducible byte for byte from the config's seeds.

#include <filesystem>
#include <fstream>

#include "issm/cpd.hpp"
#include "issm/metrics.hpp"
#include "issm/msl.hpp"
#include "issm/refine.hpp"
#include "issm/simplify.hpp"
#include "issm/synth.hpp"

namespace issm {

namespace fs = std::filesystem;

// Desk-scale defaults; any config file key overrides.
inline nlohmann::json desk_config() {
  return nlohmann::json{
      {"data",
       {{"train_n", 20},
        {"test_n", 30},
        {"profile", "standard"},
        {"dims", {96, 96, 96}},
        {"spacing_mm", {2.0, 2.0, 2.0}},
        {"smooth_sigma", 1.0},
        {"simplify_ratio", 0.1},
        {"simplify_ratio_extreme", 0.06},
        {"canonical_margin", 1.45},
        {"canonical_samples", 30000},
        {"image_samples", 4000},
        {"band_mm", 13.0},
        {"image_lo", -0.5},
        {"image_hi", 1.6}}},
      {"decoder",
       {{"width", 96},
        {"depth", 8},
        {"latent_dim", 16},
        {"dropout", 0.0},
        {"sigma", 100.0},
        {"iterations", 900},
        {"samples_per_iter", 256},
        {"lr_latent", 0.001},
        {"lr_weights", 0.0005},
        {"weight_decay", 0.0001}}},
      {"pca", {{"explained", 0.72}}},
      {"stages",
       {{{"stage", "translation"},
         {"episode_length", 7},
         {"epochs", 8},
         {"samples_per_step", 512},
         {"grid_dims", {64, 64, 64}},
         {"grid_spacing", {4.0, 4.0, 4.0}},
         {"lr", 0.001},
         {"weight_decay", 0.0001}},
        {{"stage", "scale"},
         {"episode_length", 15},
         {"epochs", 5},
         {"samples_per_step", 512},
         {"grid_dims", {48, 48, 48}},
         {"grid_spacing", {2.0, 2.0, 2.0}},
         {"lr", 0.001},
         {"weight_decay", 0.0001}},
        {{"stage", "rotation"},
         {"episode_length", 15},
         {"epochs", 5},
         {"samples_per_step", 512},
         {"grid_dims", {48, 48, 48}},
         {"grid_spacing", {2.0, 2.0, 2.0}},
         {"lr", 0.001},
         {"weight_decay", 0.0001}},
        {{"stage", "nonrigid"},
         {"episode_length", 15},
         {"epochs", 5},
         {"samples_per_step", 512},
         {"grid_dims", {48, 48, 48}},
         {"grid_spacing", {2.0, 2.0, 2.0}},
         {"lr", 0.001},
         {"weight_decay", 0.0001}}}},
      {"encoder", {{"base_channels", 12}, {"feature_dim", 64}, {"t_scale_mm", 10.0}}},
      {"refine",
       {{"band_mm", 25.0},
        {"rho_mm", 12.0},
        {"lambda1", 1.0},
        {"lambda2", 0.1},
        {"sdf_pool_size", 10},
        {"latent_noise_std", 0.01},
        {"epochs", 10},
        {"lr", 0.001},
        {"weight_decay", 0.0001},
        {"unet_channels", 6},
        {"out_scale_mm", 4.0},
        {"crop_dims", {48, 48, 48}},
        {"crop_spacing", 2.0}}},
      {"eval", {{"raster_spacing", 3.0}, {"baseline", true}}},
      {"seeds", {{"master", 20260811}}}};
}

inline nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& over) {
  for (auto& [k, v] : over.items()) {
    if (v.is_object() && base.contains(k) && base[k].is_object())
      base[k] = merge_config(base[k], v);
    else
      base[k] = v;
  }
  return base;
}

struct RunPaths {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path prep() const { return root / "prep"; }
  fs::path ckpt() const { return root / "checkpoints"; }
  fs::path infer_dir() const { return root / "infer"; }
  std::string decoder_stem() const { return (ckpt() / "decoder").string(); }
  std::string stage_stem(Stage s) const { return (ckpt() / ("stage_" + to_string(s))).string(); }
  std::string refiner_stem() const { return (ckpt() / "refiner").string(); }
  std::string report_path() const { return (root / "report.json").string(); }
  std::string manifest_path() const { return (root / "manifest.json").string(); }
  void ensure() const {
    fs::create_directories(data() / "train");
    fs::create_directories(data() / "test");
    fs::create_directories(prep());
    fs::create_directories(ckpt());
    fs::create_directories(infer_dir());
  }
};

namespace harness_detail {

inline uint64_t stage_seed(const nlohmann::json& cfg, const std::string& tag) {
  return mix_seed(cfg.at("seeds").at("master").get<uint64_t>(), fnv1a64(tag));
}

inline std::array<int, 3> dims3(const nlohmann::json& j) {
  return {j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}
inline std::array<double, 3> spac3(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

inline std::vector<SceneSpec> load_scenes(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("missing scenes file: " + path);
  nlohmann::json j;
  f >> j;
  std::vector<SceneSpec> out;
  for (const auto& s : j) out.push_back(scene_from_json(s));
  return out;
}

inline void save_scenes(const std::vector<SceneSpec>& scenes, const std::string& path) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : scenes) j.push_back(scene_to_json(s));
  write_file_atomic(path, j.dump(2) + "\n");
}

inline void update_manifest(const RunPaths& paths, const std::string& stage,
                            const std::string& status) {
  nlohmann::json m;
  {
    std::ifstream f(paths.manifest_path());
    if (f) f >> m;
  }
  if (!m.contains("stages")) m["stages"] = nlohmann::json::object();
  m["stages"][stage] = status;
  write_file_atomic(paths.manifest_path(), m.dump(2) + "\n");
}

}  // namespace harness_detail

// ---------------------------------------------------------------------------
// Individual stages (file in, file out)
// ---------------------------------------------------------------------------

inline void stage_synth(const nlohmann::json& cfg, const RunPaths& paths) {
  using namespace harness_detail;
  const auto& d = cfg.at("data");
  auto dims = dims3(d.at("dims"));
  auto spacing = spac3(d.at("spacing_mm"));
  SuiteProfile profile = profile_from_string(d.at("profile"));

  auto write_suite = [&](const std::string& split, int n, uint64_t seed) {
    auto scenes = generate_suite(n, seed, profile);
    save_scenes(scenes, (paths.data() / ("scenes_" + split + ".json")).string());
    for (const auto& sc : scenes) {
      auto [image, mask] = synthesize(sc, dims, spacing);
      save_volume(image, (paths.data() / split / (sc.id + "_image")).string());
      save_volume(mask, (paths.data() / split / (sc.id + "_mask")).string());
    }
  };
  write_suite("train", d.at("train_n"), stage_seed(cfg, "synth-train"));
  write_suite("test", d.at("test_n"), stage_seed(cfg, "synth-test"));
}

inline void stage_prep(const nlohmann::json& cfg, const RunPaths& paths) {
  using namespace harness_detail;
  const auto& d = cfg.at("data");
  auto scenes = load_scenes((paths.data() / "scenes_train.json").string());
  if (scenes.empty()) throw ValidationError("prep: no training scenes");

  const double sigma = d.at("smooth_sigma");
  const double ratio = d.at("simplify_ratio");
  const double ratio_extreme = d.at("simplify_ratio_extreme");
  const double band = d.at("band_mm");
  const uint64_t seed = stage_seed(cfg, "prep");

  struct Prepped {
    std::string id;
    Mesh simplified, extreme;
    VoxelSdf sdf;
  };
  std::vector<Prepped> shapes;
  for (const auto& sc : scenes) {
    Volume mask = load_volume((paths.data() / "train" / (sc.id + "_mask")).string());
    Prepped p;
    p.id = sc.id;
    p.sdf = mask_to_sdf(mask, band);
    save_volume(p.sdf.vol, (paths.prep() / (sc.id + "_sdf")).string());
    Mesh mesh = mask_to_mesh(mask, sigma);
    p.simplified = simplify_mesh(mesh, ratio);
    p.extreme = simplify_mesh(mesh, ratio_extreme);
    shapes.push_back(std::move(p));
  }

  // the anchor is the first training shape; the canonical frame margin keeps
  // every aligned mesh inside the unit sphere
  const auto& anchor = shapes.front();
  CanonicalFrame frame =
      make_canonical_frame(anchor.simplified, anchor.id, d.at("canonical_margin"));
  save_canonical_frame(frame, (paths.prep() / "frame.json").string());

  Vec3 mean_t = Vec3::Zero();
  nlohmann::json poses = nlohmann::json::object();
  for (auto& p : shapes) {
    // align the extremely simplified clouds, apply the pose to the simplified
    CpdResult reg = cpd_rigid_align(p.extreme, anchor.extreme);
    RigidPose pose = rebase_center(reg.pose, frame.center());
    Mesh canon = normalize_to_canonical(p.simplified, pose, frame);
    save_obj(canon, (paths.prep() / (p.id + "_canonical.obj")).string());
    nlohmann::json pj = pose_to_json(pose);
    pj["cpd_converged"] = reg.converged;
    pj["cpd_iterations"] = reg.iterations;
    poses[p.id] = pj;
    mean_t += pose.t;

    auto canon_set = sample_canonical_pairs(canon, p.id, d.at("canonical_samples"),
                                            mix_seed(seed, fnv1a64(p.id)));
    save_samples(canon_set, (paths.prep() / (p.id + "_canon_samples")).string());
    auto image_set = sample_image_pairs(p.sdf, p.id, d.at("image_samples"),
                                        mix_seed(seed, fnv1a64(p.id) ^ 1));
    save_samples(image_set, (paths.prep() / (p.id + "_image_samples")).string());
  }
  write_file_atomic((paths.prep() / "poses.json").string(), poses.dump(2) + "\n");

  // dataset-mean pose: mean placement translation, unit scale, identity
  RigidPose mean_pose = identity_pose(frame.center());
  mean_pose.t = mean_t / static_cast<double>(shapes.size());
  write_file_atomic((paths.prep() / "mean_pose.json").string(),
                    pose_to_json(mean_pose).dump(2) + "\n");
}

inline void stage_decoder(const nlohmann::json& cfg, const RunPaths& paths) {
  using namespace harness_detail;
  auto scenes = load_scenes((paths.data() / "scenes_train.json").string());
  std::vector<SdfSampleSet> sets;
  for (const auto& sc : scenes)
    sets.push_back(load_samples((paths.prep() / (sc.id + "_canon_samples")).string()));

  const auto& dc = cfg.at("decoder");
  DecoderConfig dcfg;
  dcfg.width = dc.at("width");
  dcfg.depth = dc.at("depth");
  dcfg.latent_dim = dc.at("latent_dim");
  dcfg.dropout = dc.at("dropout");
  dcfg.sigma = dc.at("sigma");
  dcfg.iterations = dc.at("iterations");
  dcfg.samples_per_iter = dc.at("samples_per_iter");
  dcfg.lr_latent = dc.at("lr_latent");
  dcfg.lr_weights = dc.at("lr_weights");
  dcfg.weight_decay = dc.at("weight_decay");
  dcfg.seed = stage_seed(cfg, "decoder");

  auto model = train_decoder<float>(sets, dcfg);
  save_decoder(model, nullptr, paths.decoder_stem(), dcfg.seed);
}

inline void stage_pca(const nlohmann::json& cfg, const RunPaths& paths) {
  auto [model, old_space] = load_decoder<float>(paths.decoder_stem());
  std::vector<Eigen::VectorXd> latents;
  for (const auto& id : model.shape_ids) {
    Eigen::VectorXd z(model.latent_dim);
    const auto& v = model.latent(id);
    for (int i = 0; i < model.latent_dim; ++i) z[i] = v[i];
    latents.push_back(z);
  }
  ShapeSpace space = fit_pca(latents, cfg.at("pca").at("explained"));
  save_decoder(model, &space, paths.decoder_stem(),
               harness_detail::stage_seed(cfg, "decoder"));
}

inline StageConfig parse_stage_config(const nlohmann::json& cfg, Stage stage) {
  using namespace harness_detail;
  const nlohmann::json* found = nullptr;
  for (const auto& sj : cfg.at("stages"))
    if (stage_from_string(sj.at("stage")) == stage) found = &sj;
  if (!found) throw ValidationError("config lacks stage: " + to_string(stage));
  StageConfig sc = default_stage_config(stage);
  sc.episode_length = found->at("episode_length");
  sc.epochs = found->at("epochs");
  sc.samples_per_step = found->at("samples_per_step");
  sc.grid_dims = dims3(found->at("grid_dims"));
  sc.grid_spacing = spac3(found->at("grid_spacing"));
  sc.lr = found->at("lr");
  sc.weight_decay = found->at("weight_decay");
  sc.image_lo = cfg.at("data").at("image_lo");
  sc.image_hi = cfg.at("data").at("image_hi");
  sc.seed = stage_seed(cfg, "pose-" + to_string(stage));
  return sc;
}

inline void stage_pose(const nlohmann::json& cfg, const RunPaths& paths, Stage stage,
                       const std::function<void(int, double)>& progress = nullptr) {
  using namespace harness_detail;
  auto [decoder, space] = load_decoder<float>(paths.decoder_stem());
  if (!space) throw std::runtime_error("pose training requires the PCA stage first");
  decoder.freeze();
  CanonicalFrame frame = load_canonical_frame((paths.prep() / "frame.json").string());

  StageConfig scfg = parse_stage_config(cfg, stage);

  // init poses: dataset mean for translation, previous stage's finals after
  RigidPose mean_pose;
  {
    std::ifstream f((paths.prep() / "mean_pose.json").string());
    nlohmann::json j;
    f >> j;
    mean_pose = pose_from_json(j);
  }
  auto scenes = load_scenes((paths.data() / "scenes_train.json").string());
  if (stage == Stage::translation) {
    for (const auto& sc : scenes) scfg.init_poses[sc.id] = mean_pose;
  } else {
    Stage prev = stage == Stage::scale ? Stage::translation
                 : stage == Stage::rotation ? Stage::scale
                                            : Stage::rotation;
    auto ck = load_stage_checkpoint<float>(paths.stage_stem(prev));
    scfg.init_poses = ck.stored_poses;
  }

  const auto& ec = cfg.at("encoder");
  auto enc = build_pose_encoder<float>(ec.at("base_channels"), ec.at("feature_dim"),
                                       space->n_components(), scfg.seed);
  enc.t_scale = ec.at("t_scale_mm");
  if (stage != Stage::translation) {
    Stage prev = stage == Stage::scale ? Stage::translation
                 : stage == Stage::rotation ? Stage::scale
                                            : Stage::rotation;
    auto ck = load_stage_checkpoint<float>(paths.stage_stem(prev));
    copy_encoder_weights(ck.encoder, enc);
  }

  std::vector<Volume> images;
  std::vector<SdfSampleSet> samples;
  std::vector<PoseTrainingCase> data;
  images.reserve(scenes.size());
  samples.reserve(scenes.size());
  for (const auto& sc : scenes) {
    images.push_back(load_volume((paths.data() / "train" / (sc.id + "_image")).string()));
    samples.push_back(load_samples((paths.prep() / (sc.id + "_image_samples")).string()));
  }
  for (size_t i = 0; i < scenes.size(); ++i)
    data.push_back({scenes[i].id, &images[i], &samples[i]});

  auto result = train_stage(enc, data, scfg, decoder, frame, *space, progress);
  save_stage_checkpoint(enc, scfg, result.final_poses, mean_pose, paths.stage_stem(stage));
}

inline void stage_refine(const nlohmann::json& cfg, const RunPaths& paths,
                         const std::function<void(int, double)>& progress = nullptr) {
  using namespace harness_detail;
  auto [decoder, space] = load_decoder<float>(paths.decoder_stem());
  decoder.freeze();
  CanonicalFrame frame = load_canonical_frame((paths.prep() / "frame.json").string());
  auto nonrigid = load_stage_checkpoint<float>(paths.stage_stem(Stage::nonrigid));
  auto rotation = load_stage_checkpoint<float>(paths.stage_stem(Stage::rotation));

  const auto& rc = cfg.at("refine");
  RefineConfig rcfg;
  rcfg.band_mm = rc.at("band_mm");
  rcfg.rho_mm = rc.at("rho_mm");
  rcfg.lambda1 = rc.at("lambda1");
  rcfg.lambda2 = rc.at("lambda2");
  rcfg.sdf_pool_size = rc.at("sdf_pool_size");
  rcfg.latent_noise_std = rc.at("latent_noise_std");
  rcfg.epochs = rc.at("epochs");
  rcfg.lr = rc.at("lr");
  rcfg.weight_decay = rc.at("weight_decay");
  rcfg.unet_channels = rc.at("unet_channels");
  rcfg.out_scale_mm = rc.at("out_scale_mm");
  rcfg.seed = stage_seed(cfg, "refine");
  auto crop_dims = dims3(rc.at("crop_dims"));
  const double crop_spacing = rc.at("crop_spacing");

  // per training case: run the non-rigid encoder (no perturbations) from the
  // rotation-stage pose to obtain loadings, then build the crop-grid case
  auto scenes = load_scenes((paths.data() / "scenes_train.json").string());
  MeanSdfCache cache =
      make_mean_sdf_cache(decoder, space->mean, frame, nonrigid.config.grid_spacing[0]);

  std::vector<RefineCase> cases;
  for (const auto& sc : scenes) {
    Volume image = load_volume((paths.data() / "train" / (sc.id + "_image")).string());
    RigidPose pose = rotation.stored_poses.at(sc.id);
    Volume grid = detail::stage_grid_image(image, nonrigid.config, pose, frame,
                                           nonrigid.config.image_lo);
    auto channel =
        normalize_image_channel(grid, nonrigid.config.image_lo, nonrigid.config.image_hi);
    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(space->n_components());
    for (int tau = 1; tau <= nonrigid.config.episode_length; ++tau) {
      auto step = encoder_step(nonrigid.encoder, grid, channel, cache, pose, Stage::nonrigid,
                               false, 0);
      pose = step.composed;
      for (int i = 0; i < lambda.size(); ++i) lambda[i] = step.lambda->val[i];
    }

    RefineCase c;
    c.shape_id = sc.id;
    Vec3 cc = pose.apply(frame.center());
    std::array<double, 3> origin{cc[0] - 0.5 * (crop_dims[0] - 1) * crop_spacing,
                                 cc[1] - 0.5 * (crop_dims[1] - 1) * crop_spacing,
                                 cc[2] - 0.5 * (crop_dims[2] - 1) * crop_spacing};
    c.image = resample(image, crop_dims, {crop_spacing, crop_spacing, crop_spacing}, origin,
                       cfg.at("data").at("image_lo"));
    Volume gt_sdf_full = load_volume((paths.prep() / (sc.id + "_sdf")).string());
    Volume gt_crop = resample(gt_sdf_full, crop_dims,
                              {crop_spacing, crop_spacing, crop_spacing}, origin,
                              2.0 * frame.scale());
    gt_crop.kind = VolumeKind::sdf;
    c.gt_sdf = {gt_crop, rcfg.band_mm};
    c.pose = pose;
    c.loadings = lambda;
    cases.push_back(std::move(c));
  }

  auto refiner = build_refiner<float>(rcfg.unet_channels, rcfg.seed);
  refiner.out_scale_mm = rcfg.out_scale_mm;
  refiner.image_lo = cfg.at("data").at("image_lo");
  refiner.image_hi = cfg.at("data").at("image_hi");
  train_refiner(refiner, cases, decoder, frame, *space, rcfg, progress);
  save_refiner(refiner, paths.refiner_stem(), rcfg.seed);
}

// ---------------------------------------------------------------------------
// Inference helpers shared by eval and the CLI `infer` subcommand.
// ---------------------------------------------------------------------------

template <typename S = float>
struct LoadedModels {
  DecoderModel<S> decoder;
  std::unique_ptr<ShapeSpace> space;
  CanonicalFrame frame;
  MslModels<S> msl;
  RefinerModel<S> refiner;
  RefineConfig refine_cfg;
  std::array<int, 3> crop_dims{48, 48, 48};
  double crop_spacing = 2.0;
};

template <typename S = float>
LoadedModels<S> load_models(const nlohmann::json& cfg, const RunPaths& paths) {
  LoadedModels<S> m;
  auto [decoder, space] = load_decoder<S>(paths.decoder_stem());
  m.decoder = std::move(decoder);
  m.space = std::move(space);
  if (!m.space) throw std::runtime_error("decoder checkpoint lacks the shape space");
  m.decoder.freeze();
  m.frame = load_canonical_frame((paths.prep() / "frame.json").string());
  m.msl.decoder = &m.decoder;
  m.msl.frame = m.frame;
  m.msl.space = *m.space;
  for (Stage st : {Stage::translation, Stage::scale, Stage::rotation, Stage::nonrigid})
    m.msl.stages.emplace(st, load_stage_checkpoint<S>(paths.stage_stem(st)));
  m.refiner = load_refiner<S>(paths.refiner_stem());
  const auto& rc = cfg.at("refine");
  m.refine_cfg.band_mm = rc.at("band_mm");
  m.refine_cfg.rho_mm = rc.at("rho_mm");
  m.refine_cfg.lambda1 = rc.at("lambda1");
  m.refine_cfg.lambda2 = rc.at("lambda2");
  m.crop_dims = harness_detail::dims3(rc.at("crop_dims"));
  m.crop_spacing = rc.at("crop_spacing");
  return m;
}

// Full chain on one image: MSL stages, crop-grid rasterization of the
// non-rigid SDF, refinement. Returns masks resampled onto `like`'s grid.
template <typename S>
struct CaseInference {
  InferenceResult msl;
  VoxelSdf nonrigid_crop;   // reinitialized crop-grid SDF_lambda
  VoxelSdf refined_crop;
  std::map<std::string, Volume> stage_masks;  // on the reference grid
};

template <typename S = float>
CaseInference<S> infer_case(const LoadedModels<S>& m, const Volume& image, const Volume& like,
                            double raster_spacing) {
  CaseInference<S> out;
  // stage poses from the MSL chain; coarse output raster only for the pose
  // rows (the final SDF is built on the crop grid below)
  auto phys = like.physical_center();
  std::array<int, 3> rdims;
  std::array<double, 3> rspacing{raster_spacing, raster_spacing, raster_spacing};
  std::array<double, 3> rorigin;
  for (int a = 0; a < 3; ++a) {
    double extent = like.dims[a] * like.spacing[a];
    rdims[a] = std::max(8, static_cast<int>(std::ceil(extent / raster_spacing)));
    rorigin[a] = phys[a] - 0.5 * (rdims[a] - 1) * raster_spacing;
  }
  out.msl = run_msl_inference(image, m.msl, rdims, rspacing, rorigin);

  const double far = 2.0 * m.frame.scale();
  auto to_mask = [&](const Volume& sdf_any) {
    Volume up = resample(sdf_any, like.dims, like.spacing, like.origin, far);
    return sdf_to_mask(up);
  };

  // rigid-stage rows: mean latent rasterized at each stage pose
  std::vector<S> mu(m.space->latent_dim());
  for (int i = 0; i < m.space->latent_dim(); ++i) mu[i] = static_cast<S>(m.space->mean[i]);
  for (const auto& name : {"translation", "scale", "rotation"}) {
    VoxelSdf s = rasterize(m.decoder, mu, m.frame, out.msl.stage_poses.at(name), rdims,
                           rspacing, rorigin);
    out.stage_masks[name] = to_mask(s.vol);
  }

  // non-rigid + refined on the crop grid
  Vec3 cc = out.msl.final_pose.apply(m.frame.center());
  std::array<double, 3> corigin{cc[0] - 0.5 * (m.crop_dims[0] - 1) * m.crop_spacing,
                                cc[1] - 0.5 * (m.crop_dims[1] - 1) * m.crop_spacing,
                                cc[2] - 0.5 * (m.crop_dims[2] - 1) * m.crop_spacing};
  std::array<double, 3> cspacing{m.crop_spacing, m.crop_spacing, m.crop_spacing};
  Eigen::VectorXd z = latent_from_loadings(*m.space, out.msl.loadings);
  std::vector<S> zs(z.size());
  for (int i = 0; i < z.size(); ++i) zs[i] = static_cast<S>(z[i]);
  VoxelSdf crop_raw = rasterize(m.decoder, zs, m.frame, out.msl.final_pose, m.crop_dims,
                                cspacing, corigin);
  crop_raw.band_mm = m.refine_cfg.band_mm;
  // a catastrophically wrong pose can leave the crop without a crossing;
  // keep the (all-positive) field so the case scores as an empty prediction
  bool has_crossing = false, has_positive = false;
  for (float v : crop_raw.vol.data) (v < 0.f ? has_crossing : has_positive) = true;
  out.nonrigid_crop = (has_crossing && has_positive) ? reinitialize_sdf(crop_raw) : crop_raw;
  out.stage_masks["nonrigid"] = to_mask(out.nonrigid_crop.vol);

  Volume crop_image = resample(image, m.crop_dims, cspacing, corigin, m.refiner.image_lo);
  Volume residual = predict_residual(m.refiner, crop_image, out.nonrigid_crop);
  out.refined_crop = out.nonrigid_crop;
  for (size_t i = 0; i < residual.data.size(); ++i)
    if (std::abs(out.nonrigid_crop.vol.data[i]) <= m.refine_cfg.band_mm)
      out.refined_crop.vol.data[i] += residual.data[i];
  out.stage_masks["refine"] = to_mask(out.refined_crop.vol);
  return out;
}

// ---------------------------------------------------------------------------
// Eval: the five-row ablation (Table-style), per-case diagnostics, baseline.
// ---------------------------------------------------------------------------

inline nlohmann::json stage_eval(const nlohmann::json& cfg, const RunPaths& paths) {
  using namespace harness_detail;
  auto models = load_models<float>(cfg, paths);
  auto scenes = load_scenes((paths.data() / "scenes_test.json").string());
  const double raster_spacing = cfg.at("eval").at("raster_spacing");

  const std::vector<std::string> rows{"translation", "scale", "rotation", "nonrigid", "refine"};
  std::map<std::string, std::vector<MetricsReport>> row_metrics;
  nlohmann::json per_case = nlohmann::json::array();

  // baseline classifier fit on the training images
  std::unique_ptr<VoxelClassifier> baseline;
  std::vector<MetricsReport> baseline_metrics;
  if (cfg.at("eval").value("baseline", true)) {
    auto train_scenes = load_scenes((paths.data() / "scenes_train.json").string());
    std::vector<std::pair<Volume, Volume>> train_vols;
    for (const auto& sc : train_scenes)
      train_vols.push_back(
          {load_volume((paths.data() / "train" / (sc.id + "_image")).string()),
           load_volume((paths.data() / "train" / (sc.id + "_mask")).string())});
    std::vector<std::pair<const Volume*, const Volume*>> refs;
    for (auto& [img, mask] : train_vols) refs.push_back({&img, &mask});
    baseline = std::make_unique<VoxelClassifier>(VoxelClassifier::fit(refs));
  }

  for (const auto& sc : scenes) {
    Volume image = load_volume((paths.data() / "test" / (sc.id + "_image")).string());
    Volume gt = load_volume((paths.data() / "test" / (sc.id + "_mask")).string());
    auto inf = infer_case(models, image, gt, raster_spacing);

    nlohmann::json case_json{{"id", sc.id}};
    for (const auto& row : rows) {
      auto r = compute_metrics(inf.stage_masks.at(row), gt);
      row_metrics[row].push_back(r);
      case_json["dsc_" + row] = r.dsc;
    }
    // translation centroid error vs the ground-truth mask centroid
    Vec3 placed = inf.msl.stage_poses.at("translation").apply(models.frame.center());
    Vec3 gt_centroid = Vec3::Zero();
    double count = 0;
    for (int z = 0; z < gt.dims[2]; ++z)
      for (int y = 0; y < gt.dims[1]; ++y)
        for (int x = 0; x < gt.dims[0]; ++x)
          if (gt.at(x, y, z) != 0.0f) {
            auto p = gt.voxel_center(x, y, z);
            gt_centroid += Vec3(p[0], p[1], p[2]);
            count += 1;
          }
    gt_centroid /= std::max(1.0, count);
    case_json["translation_centroid_error_mm"] = (placed - gt_centroid).norm();
    // first-step translation correction vs the true offset direction
    Vec3 init_offset = gt_centroid - models.msl.stages.at(Stage::translation)
                                         .init_pose_mean.apply(models.frame.center());
    double dot = init_offset.norm() > 1e-9 && inf.msl.first_translation_delta.norm() > 1e-9
                     ? inf.msl.first_translation_delta.normalized().dot(init_offset.normalized())
                     : 0.0;
    case_json["first_step_alignment"] = dot;

    if (baseline) {
      auto pred = baseline->predict(image);
      auto r = compute_metrics(pred, gt);
      baseline_metrics.push_back(r);
      case_json["dsc_baseline"] = r.dsc;
    }
    per_case.push_back(case_json);

    // persist inference artifacts
    save_volume(inf.refined_crop.vol, (paths.infer_dir() / (sc.id + "_sdf")).string());
    bool crossing = false, positive = false;
    for (float v : inf.refined_crop.vol.data) (v < 0.f ? crossing : positive) = true;
    if (crossing && positive) {
      VoxelSdf for_mesh = reinitialize_sdf(inf.refined_crop);
      Mesh surf = extract_isosurface(for_mesh);
      save_obj(surf, (paths.infer_dir() / (sc.id + "_mesh.obj")).string());
    }
    write_file_atomic((paths.infer_dir() / (sc.id + "_pose.json")).string(),
                      pose_to_json(inf.msl.final_pose).dump(2) + "\n");
  }

  nlohmann::json ablation = nlohmann::json::array();
  for (const auto& row : rows) {
    auto s = summarize(row_metrics[row]);
    nlohmann::json rj = summary_to_json(s);
    rj["row"] = row;
    rj.erase("per_case");
    ablation.push_back(rj);
  }

  nlohmann::json report;
  report["ablation"] = ablation;
  report["per_case"] = per_case;
  if (baseline) {
    auto bs = summarize(baseline_metrics);
    report["baseline"] = summary_to_json(bs);
    report["baseline"].erase("per_case");
  }
  report["config"] = cfg;
  nlohmann::json sums = nlohmann::json::object();
  for (const auto& stem :
       {paths.decoder_stem(), paths.stage_stem(Stage::translation),
        paths.stage_stem(Stage::scale), paths.stage_stem(Stage::rotation),
        paths.stage_stem(Stage::nonrigid), paths.refiner_stem()}) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(file_checksum(stem + ".bin")));
    sums[fs::path(stem).filename().string()] = buf;
  }
  report["checkpoint_checksums"] = sums;
  write_file_atomic(paths.report_path(), report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------
// Orchestration: run all stages, persisting completed work; failures rethrow
// annotated with the stage name.
// ---------------------------------------------------------------------------

inline nlohmann::json run_experiment(const nlohmann::json& user_cfg, const std::string& out_dir,
                                     const std::function<void(const std::string&)>& on_stage =
                                         nullptr) {
  nlohmann::json cfg = merge_config(desk_config(), user_cfg);
  RunPaths paths{fs::path(out_dir)};
  paths.ensure();
  write_file_atomic((paths.root / "config.json").string(), cfg.dump(2) + "\n");

  struct StageDef {
    std::string name;
    std::function<void()> run;
  };
  nlohmann::json report;
  std::vector<StageDef> defs{
      {"synth", [&] { stage_synth(cfg, paths); }},
      {"prep", [&] { stage_prep(cfg, paths); }},
      {"decoder", [&] { stage_decoder(cfg, paths); }},
      {"pca", [&] { stage_pca(cfg, paths); }},
      {"pose-translation", [&] { stage_pose(cfg, paths, Stage::translation); }},
      {"pose-scale", [&] { stage_pose(cfg, paths, Stage::scale); }},
      {"pose-rotation", [&] { stage_pose(cfg, paths, Stage::rotation); }},
      {"pose-nonrigid", [&] { stage_pose(cfg, paths, Stage::nonrigid); }},
      {"refine", [&] { stage_refine(cfg, paths); }},
      {"eval", [&] { report = stage_eval(cfg, paths); }},
  };
  for (auto& def : defs) {
    if (on_stage) on_stage(def.name);
    try {
      def.run();
      harness_detail::update_manifest(paths, def.name, "completed");
    } catch (const std::exception& e) {
      harness_detail::update_manifest(paths, def.name, std::string("failed: ") + e.what());
      throw std::runtime_error("stage '" + def.name + "' failed: " + e.what());
    }
  }
  return report;
}

}  // namespace issm
