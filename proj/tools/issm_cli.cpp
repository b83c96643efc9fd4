// Command-line front end: synthetic suite generation, preprocessing, model
// training, inference and evaluation. Exit codes: 0 success, 1 validation
// error, 2 runtime failure.

#include <CLI11.hpp>

#include <iostream>

#include "issm/harness.hpp"

using namespace issm;

namespace {

nlohmann::json load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  f >> j;
  return j;
}

int cmd_synth(const std::string& out, int n, const std::string& profile, uint64_t seed,
              std::vector<int> dims, double spacing) {
  fs::create_directories(out);
  auto scenes = generate_suite(n, seed, profile_from_string(profile));
  harness_detail::save_scenes(scenes, (fs::path(out) / "scenes.json").string());
  std::array<int, 3> d{dims.at(0), dims.at(1), dims.at(2)};
  for (const auto& sc : scenes) {
    auto [image, mask] = synthesize(sc, d, {spacing, spacing, spacing});
    save_volume(image, (fs::path(out) / (sc.id + "_image")).string());
    save_volume(mask, (fs::path(out) / (sc.id + "_mask")).string());
  }
  nlohmann::json manifest{{"count", n}, {"profile", profile}, {"seed", seed}};
  write_file_atomic((fs::path(out) / "manifest.json").string(), manifest.dump(2) + "\n");
  std::cout << "wrote " << n << " scenes to " << out << "\n";
  return 0;
}

int cmd_prep(const std::string& masks_dir, const std::string& out, double band, double sigma,
             double ratio, double ratio_extreme, double margin, int canon_n, int image_n,
             uint64_t seed) {
  // collect mask volume stems (sorted for determinism)
  std::vector<std::string> stems;
  for (const auto& entry : fs::directory_iterator(masks_dir)) {
    auto p = entry.path();
    if (p.extension() == ".json" && p.stem().string().find("mask") != std::string::npos)
      stems.push_back((p.parent_path() / p.stem()).string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw ValidationError("prep: no mask volumes found in " + masks_dir);

  fs::create_directories(out);
  struct P {
    std::string id;
    Mesh simplified, extreme;
    VoxelSdf sdf;
  };
  std::vector<P> shapes;
  for (const auto& stem : stems) {
    P p;
    p.id = fs::path(stem).filename().string();
    Volume mask = load_volume(stem);
    p.sdf = mask_to_sdf(mask, band);
    save_volume(p.sdf.vol, (fs::path(out) / (p.id + "_sdf")).string());
    Mesh mesh = mask_to_mesh(mask, sigma);
    p.simplified = simplify_mesh(mesh, ratio);
    p.extreme = simplify_mesh(mesh, ratio_extreme);
    shapes.push_back(std::move(p));
  }
  CanonicalFrame frame = make_canonical_frame(shapes[0].simplified, shapes[0].id, margin);
  save_canonical_frame(frame, (fs::path(out) / "frame.json").string());
  Vec3 mean_t = Vec3::Zero();
  for (auto& p : shapes) {
    CpdResult reg = cpd_rigid_align(p.extreme, shapes[0].extreme);
    RigidPose pose = rebase_center(reg.pose, frame.center());
    Mesh canon = normalize_to_canonical(p.simplified, pose, frame);
    save_obj(canon, (fs::path(out) / (p.id + "_canonical.obj")).string());
    write_file_atomic((fs::path(out) / (p.id + "_pose.json")).string(),
                      pose_to_json(pose).dump(2) + "\n");
    mean_t += pose.t;
    save_samples(sample_canonical_pairs(canon, p.id, canon_n, mix_seed(seed, fnv1a64(p.id))),
                 (fs::path(out) / (p.id + "_canon_samples")).string());
    save_samples(sample_image_pairs(p.sdf, p.id, image_n, mix_seed(seed, fnv1a64(p.id) ^ 1)),
                 (fs::path(out) / (p.id + "_image_samples")).string());
  }
  RigidPose mean_pose = identity_pose(frame.center());
  mean_pose.t = mean_t / static_cast<double>(shapes.size());
  write_file_atomic((fs::path(out) / "mean_pose.json").string(),
                    pose_to_json(mean_pose).dump(2) + "\n");
  std::cout << "prepped " << shapes.size() << " shapes to " << out << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out) {
  nlohmann::json cfg = config_path.empty() ? nlohmann::json::object() : load_json(config_path);
  auto report = run_experiment(cfg, out, [](const std::string& s) {
    std::cout << "[stage] " << s << "\n" << std::flush;
  });
  std::cout << "report written to " << (fs::path(out) / "report.json").string() << "\n";
  for (const auto& row : report.at("ablation"))
    std::cout << "  " << row.at("row").get<std::string>() << ": mean DSC "
              << row.at("dsc").at("mean").get<double>() << "\n";
  return 0;
}

int cmd_infer(const std::string& image_stem, const std::string& models_dir,
              const std::string& out_mesh, const std::string& out_sdf) {
  RunPaths paths{fs::path(models_dir)};
  nlohmann::json cfg = load_json((paths.root / "config.json").string());
  auto models = load_models<float>(cfg, paths);
  Volume image = load_volume(image_stem);
  auto inf = infer_case(models, image, image, cfg.at("eval").at("raster_spacing"));
  if (!out_sdf.empty()) save_volume(inf.refined_crop.vol, out_sdf);
  if (!out_mesh.empty()) {
    VoxelSdf for_mesh = reinitialize_sdf(inf.refined_crop);
    save_obj(extract_isosurface(for_mesh), out_mesh);
  }
  std::cout << pose_to_json(inf.msl.final_pose).dump(2) << "\n";
  return 0;
}

int cmd_eval(const std::string& pred_stem, const std::string& gt_stem,
             const std::string& report_path) {
  Volume pred = load_volume(pred_stem);
  Volume gt = load_volume(gt_stem);
  if (pred.kind == VolumeKind::sdf) pred = sdf_to_mask(pred);
  if (gt.kind == VolumeKind::sdf) gt = sdf_to_mask(gt);
  auto r = compute_metrics(pred, gt);
  nlohmann::json j{{"dsc", r.dsc},
                   {"assd_mm", r.assd_mm},
                   {"hd_mm", r.hd_mm},
                   {"degenerate", r.degenerate}};
  if (!report_path.empty())
    write_file_atomic(report_path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit statistical shape model pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene suite");
  int synth_n = 10;
  std::string synth_profile = "standard", synth_out;
  uint64_t synth_seed = 1;
  std::vector<int> synth_dims{96, 96, 96};
  double synth_spacing = 2.0;
  synth->add_option("--n", synth_n, "number of scenes")->required();
  synth->add_option("--profile", synth_profile, "standard|low-contrast");
  synth->add_option("--seed", synth_seed, "rng seed")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--dims", synth_dims, "grid dims (3 ints)")->expected(3);
  synth->add_option("--spacing", synth_spacing, "voxel spacing (mm)");

  // prep
  auto* prep = app.add_subcommand("prep", "masks to canonical shapes and sample sets");
  std::string prep_masks, prep_out;
  double prep_band = 13.0, prep_sigma = 1.0, prep_ratio = 0.1, prep_ratio_x = 0.02,
         prep_margin = 1.3;
  int prep_canon = 30000, prep_image = 4000;
  uint64_t prep_seed = 1;
  prep->add_option("--masks", prep_masks, "directory with *_mask volume pairs")->required();
  prep->add_option("--out", prep_out, "output directory")->required();
  prep->add_option("--band", prep_band, "image-sample band (mm)");
  prep->add_option("--sigma", prep_sigma, "mask smoothing sigma (voxels)");
  prep->add_option("--ratio", prep_ratio, "simplification ratio");
  prep->add_option("--ratio-extreme", prep_ratio_x, "extreme simplification ratio");
  prep->add_option("--margin", prep_margin, "canonical frame margin");
  prep->add_option("--canonical-samples", prep_canon, "canonical pairs per shape");
  prep->add_option("--image-samples", prep_image, "pixel-space pairs per shape");
  prep->add_option("--seed", prep_seed, "rng seed");

  // train-decoder / pca / train-pose / train-refine need a run directory
  auto* tdec = app.add_subcommand("train-decoder", "train the shape auto-decoder");
  std::string tdec_samples, tdec_cfg, tdec_out;
  tdec->add_option("--samples", tdec_samples, "run data directory (with prep/)")->required();
  tdec->add_option("--cfg", tdec_cfg, "experiment config json");
  tdec->add_option("--out", tdec_out, "run directory (defaults to --samples)");

  auto* pca = app.add_subcommand("pca", "fit the latent PCA shape space");
  std::string pca_ckpt;
  double pca_explained = 0.72;
  pca->add_option("--checkpoint", pca_ckpt, "run directory")->required();
  pca->add_option("--explained", pca_explained, "target explained variance");

  auto* tpose = app.add_subcommand("train-pose", "train one pose stage");
  std::string tpose_stage, tpose_cfg, tpose_run;
  tpose->add_option("--stage", tpose_stage, "trans|scale|rot|nonrigid")->required();
  tpose->add_option("--cfg", tpose_cfg, "experiment config json");
  tpose->add_option("--run", tpose_run, "run directory")->required();

  auto* trefine = app.add_subcommand("train-refine", "train the level-set refiner");
  std::string trefine_cfg, trefine_run;
  trefine->add_option("--cfg", trefine_cfg, "experiment config json");
  trefine->add_option("--run", trefine_run, "run directory")->required();

  // infer / eval / run
  auto* infer = app.add_subcommand("infer", "delineate one image volume");
  std::string infer_image, infer_models, infer_mesh, infer_sdf;
  infer->add_option("--image", infer_image, "image volume stem")->required();
  infer->add_option("--models", infer_models, "run directory with checkpoints")->required();
  infer->add_option("--out-mesh", infer_mesh, "output OBJ path");
  infer->add_option("--out-sdf", infer_sdf, "output SDF volume stem");

  auto* evalc = app.add_subcommand("eval", "score a predicted mask against ground truth");
  std::string eval_pred, eval_gt, eval_report;
  evalc->add_option("--pred", eval_pred, "prediction volume stem")->required();
  evalc->add_option("--gt", eval_gt, "ground-truth mask stem")->required();
  evalc->add_option("--report", eval_report, "output report json");

  auto* run = app.add_subcommand("run", "run the full experiment pipeline");
  std::string run_cfg, run_out;
  run->add_option("--config", run_cfg, "experiment config json");
  run->add_option("--out", run_out, "run directory")->required();

  try {
    app.parse(argc, argv);
    if (*synth)
      return cmd_synth(synth_out, synth_n, synth_profile, synth_seed, synth_dims, synth_spacing);
    if (*prep)
      return cmd_prep(prep_masks, prep_out, prep_band, prep_sigma, prep_ratio, prep_ratio_x,
                      prep_margin, prep_canon, prep_image, prep_seed);
    if (*tdec) {
      nlohmann::json cfg = merge_config(
          desk_config(), tdec_cfg.empty() ? nlohmann::json::object() : load_json(tdec_cfg));
      RunPaths paths{fs::path(tdec_out.empty() ? tdec_samples : tdec_out)};
      stage_decoder(cfg, paths);
      std::cout << "decoder checkpoint: " << paths.decoder_stem() << "\n";
      return 0;
    }
    if (*pca) {
      RunPaths paths{fs::path(pca_ckpt)};
      nlohmann::json cfg = desk_config();
      cfg["pca"]["explained"] = pca_explained;
      stage_pca(cfg, paths);
      std::cout << "shape space stored in " << paths.decoder_stem() << "\n";
      return 0;
    }
    if (*tpose) {
      nlohmann::json cfg = merge_config(
          desk_config(), tpose_cfg.empty() ? nlohmann::json::object() : load_json(tpose_cfg));
      RunPaths paths{fs::path(tpose_run)};
      stage_pose(cfg, paths, stage_from_string(tpose_stage));
      return 0;
    }
    if (*trefine) {
      nlohmann::json cfg = merge_config(
          desk_config(),
          trefine_cfg.empty() ? nlohmann::json::object() : load_json(trefine_cfg));
      RunPaths paths{fs::path(trefine_run)};
      stage_refine(cfg, paths);
      return 0;
    }
    if (*infer) return cmd_infer(infer_image, infer_models, infer_mesh, infer_sdf);
    if (*evalc) return cmd_eval(eval_pred, eval_gt, eval_report);
    if (*run) return cmd_run(run_cfg, run_out);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
