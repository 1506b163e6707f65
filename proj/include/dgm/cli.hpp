#pragma once

#include <iostream>

#include "CLI11.hpp"
#include "dgm/costing.hpp"
#include "dgm/gradcheck.hpp"
#include "dgm/service.hpp"

namespace dgm::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Flags shared by every subcommand that builds a hierarchy.
struct RunFlags {
  HierarchyConfig cfg;
  std::string mode = "eval";
  std::optional<std::size_t> em_iters;
  bool no_tdmp = false;

  void add_to(CLI::App& app) {
    app.add_option("--levels", cfg.levels, "hierarchy levels")->check(CLI::Range(1, 16))->capture_default_str();
    app.add_option("--graph-width", cfg.graph_width, "vertex feature width D")->check(CLI::Range(1, 4096))->capture_default_str();
    app.add_option("--sigma", cfg.sigma, "Gaussian kernel width")->check(CLI::PositiveNumber)->capture_default_str();
    app.add_option("--em-iters", em_iters, "EM iterations (overrides --mode)")->check(CLI::Range(1, 1000));
    app.add_flag("--no-tdmp", no_tdmp, "disable top-down message passing");
    app.add_option("--seed", cfg.seed, "seed for parameters and random choices")->capture_default_str();
    app.add_option("--mode", mode, "train (K=5) or eval (K=10)")->check(CLI::IsMember({"train", "eval"}))->capture_default_str();
    app.add_option("--max-superpixels", cfg.max_superpixels, "superpixel cap")->check(CLI::Range(1, 100000))->capture_default_str();
  }

  HierarchyConfig resolve() const {
    HierarchyConfig c = cfg;
    c.mode = mode == "train" ? RunMode::Train : RunMode::Eval;
    c.em_iters_override = em_iters;
    c.tdmp_enabled = !no_tdmp;
    c.validate();
    return c;
  }
};

// Feature and superpixel inputs for build / pipeline.
struct InputFlags {
  std::string image;
  std::vector<std::string> features;
  std::string labels;
  std::size_t superpixels = 64;

  void add_to(CLI::App& app) {
    app.add_option("--image", image, "PPM image; demo features are extracted from it")->check(CLI::ExistingFile);
    app.add_option("--features", features, "feature tensors F^1..F^L (.dgmt), finest first")->check(CLI::ExistingFile);
    app.add_option("--labels", labels, "superpixel label map (.dgmt)")->check(CLI::ExistingFile);
    app.add_option("--superpixels", superpixels, "target count when generating superpixels")->check(CLI::Range(1, 100000))->capture_default_str();
  }
};

struct LoadedInputs {
  GraphInputs<float> inputs;
  std::optional<ByteSequence> image_bytes;
  std::map<std::string, std::string> hashes;
};

inline LoadedInputs load_inputs(const InputFlags& f, const HierarchyConfig& cfg) {
  if (f.image.empty() == f.features.empty()) throw CLI::ValidationError("inputs", "give exactly one of --image or --features");
  LoadedInputs r;
  std::vector<FeatureMap<float>> feats;
  std::optional<Tensor> image;
  if (!f.image.empty()) {
    r.image_bytes = read_file(f.image);
    r.hashes["image"] = sha256_hex(*r.image_bytes);
    image = decode_ppm(*r.image_bytes);
    feats = extract_demo_features<float>(*image);
  } else {
    for (std::size_t i = 0; i < f.features.size(); ++i) {
      r.hashes["features." + std::to_string(i + 1)] = sha256_file(f.features[i]);
      feats.push_back(to_feature_map<float>(load_tensor(f.features[i])));
    }
  }
  if (feats.size() < cfg.levels)
    throw Error(ErrorCode::LevelCountMismatch, std::to_string(feats.size()) + " feature maps for " +
                                                   std::to_string(cfg.levels) + " levels");
  feats.resize(cfg.levels);
  SuperpixelMap sp;
  if (!f.labels.empty()) {
    r.hashes["labels"] = sha256_file(f.labels);
    sp = validate_label_map(load_tensor(f.labels), std::numeric_limits<std::size_t>::max());
  } else if (image) {
    sp = generate_superpixels(*image, f.superpixels, cfg.seed);
  } else {
    throw CLI::ValidationError("--labels", "required with --features");
  }
  sp = greedy_merge(sp, feats[0], cfg.max_superpixels);
  r.inputs = GraphInputs<float>::make(std::move(feats), std::move(sp));
  return r;
}

inline void write_grouping_pgms(const std::filesystem::path& dir, const Hierarchy<float>& h, const SuperpixelMap& sp,
                                Manifest& m) {
  const auto maps = grouping_maps(h, sp);
  for (std::size_t l = 0; l < maps.size(); ++l) {
    const std::string name = "groups_" + std::to_string(l + 1) + ".pgm";
    write_file(dir / name, encode_pgm(maps[l].height, maps[l].width, label_pixels(maps[l])));
    m.add_output(dir, name);
  }
}

inline std::pair<std::int64_t, std::int64_t> parse_point(const std::string& s) {
  const auto comma = s.find(',');
  if (comma == std::string::npos) throw CLI::ValidationError("click", "expected x,y but got '" + s + "'");
  try {
    std::size_t a = 0, b = 0;
    const auto x = std::stoll(s.substr(0, comma), &a), y = std::stoll(s.substr(comma + 1), &b);
    if (a != comma || b != s.size() - comma - 1) throw std::invalid_argument(s);
    return {x, y};
  } catch (const std::logic_error&) {
    throw CLI::ValidationError("click", "expected x,y but got '" + s + "'");
  }
}

inline HeadSpec pipeline_heads() { return HeadSpec{0, 0, 0, 2, 0}; }

/// build and pipeline share everything up to the bottom-up hierarchy.
inline int run_build(const RunFlags& rf, const InputFlags& inf, const std::string& out, bool full, std::size_t cam_class,
                     std::ostream& os) {
  namespace fs = std::filesystem;
  const auto cfg = rf.resolve();
  const auto in = load_inputs(inf, cfg);
  fs::create_directories(out);
  Manifest m;
  m.command = full ? "pipeline" : "build";
  m.config = config_to_json(cfg);
  m.config["superpixel_target"] = inf.superpixels;
  m.seed = cfg.seed;
  m.inputs = in.hashes;

  const auto params = init_model_params<float>(cfg, in.inputs.channels(), pipeline_heads(), cfg.seed);
  const auto& sp = in.inputs.superpixels;
  save_tensor(fs::path(out) / bundle_file::kSuperpixels, label_map_tensor(sp));
  m.add_output(out, bundle_file::kSuperpixels);
  if (in.image_bytes) {
    write_file(fs::path(out) / bundle_file::kImage, *in.image_bytes);
    m.add_output(out, bundle_file::kImage);
  }

  Hierarchy<float> h;
  if (!full) {
    h = build_hierarchy(in.inputs, cfg, params);
  } else {
    const auto r = run_graph_pipeline(in.inputs, cfg, params);
    h = r.refined;
    for (std::size_t l = 0; l < r.reprojected.size(); ++l) {
      const std::string name = "fhat_" + std::to_string(l + 1) + ".dgmt";
      save_tensor(fs::path(out) / name, to_tensor(r.reprojected[l]));
      m.add_output(out, name);
    }
    const auto grads = scene_vertex_gradients(in.inputs, cfg, params, cam_class);
    std::vector<std::vector<double>> heat;
    for (std::size_t l = 1; l <= cfg.levels; ++l)
      heat.push_back(graph_gradcam(r.bottom_up, sp, l, grads[l - 1]).vertex_heat);
    write_file(fs::path(out) / bundle_file::kGradcam, gradcam_to_json(heat).dump() + "\n");
    m.add_output(out, bundle_file::kGradcam);
    m.config["gradcam_class"] = cam_class;
  }
  save_hierarchy(fs::path(out) / bundle_file::kHierarchy, h);
  m.add_output(out, bundle_file::kHierarchy);
  write_grouping_pgms(out, h, sp, m);
  m.save(fs::path(out) / bundle_file::kManifest);

  os << "levels " << h.num_levels() << " sizes";
  for (auto s : h.sizes()) os << ' ' << s;
  os << "\nwrote " << out << "\n";
  return kExitOk;
}

/// Parses and runs one command line. Diagnostics go to `err`, results to `out`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  namespace fs = std::filesystem;
  CLI::App app{"Deep Grouping Model pipeline"};
  app.name("dgm");
  app.require_subcommand(1);
  std::function<int()> action;

  RunFlags rf;
  InputFlags inf;
  std::string out_dir, bundle_dir, data_dir;
  std::size_t level = 1, cam_class = 0;

  auto* build = app.add_subcommand("build", "features + superpixels -> hierarchy JSON and grouping PGMs");
  rf.add_to(*build);
  inf.add_to(*build);
  build->add_option("--out", out_dir, "output directory")->required();
  build->callback([&] { action = [&] { return run_build(rf, inf, out_dir, false, 0, out); }; });

  auto* pipe = app.add_subcommand("pipeline", "build + top-down passing + re-projection -> F-hat tensors and a bundle");
  rf.add_to(*pipe);
  inf.add_to(*pipe);
  pipe->add_option("--out", out_dir, "output directory")->required();
  pipe->add_option("--gradcam-class", cam_class, "scene class explained by Grad-CAM")->capture_default_str();
  pipe->callback([&] { action = [&] { return run_build(rf, inf, out_dir, true, cam_class, out); }; });

  TrainOptions topt;
  topt.base_lr = 0.5;
  auto* train = app.add_subcommand("train-toy", "train the toy parsing heads on a dataset directory");
  rf.add_to(*train);
  train->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--steps", topt.steps, "gradient steps")->check(CLI::Range(1, 1000000))->capture_default_str();
  train->add_option("--lr", topt.base_lr, "base learning rate")->check(CLI::NonNegativeNumber)->capture_default_str();
  train->add_option("--power", topt.power, "poly decay power")->capture_default_str();
  train->add_flag("--two-phase", topt.two_phase_texture, "train the texture branch after the rest");
  train->add_option("--out", out_dir, "output directory")->required();
  train->callback([&] {
    action = [&] {
      const auto cfg = rf.resolve();
      topt.seed = cfg.seed;
      topt.heads = synthetic_heads();
      const auto data = load_dataset<float>(data_dir, DatasetOptions{64, cfg.seed, cfg.max_superpixels});
      const auto res = train_toy(data, cfg, topt);
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "history.csv", res.history.to_csv());
      Manifest m;
      m.command = "train-toy";
      m.config = config_to_json(cfg);
      m.config["steps"] = topt.steps;
      m.config["base_lr"] = topt.base_lr;
      m.config["power"] = topt.power;
      m.config["two_phase_texture"] = topt.two_phase_texture;
      m.seed = cfg.seed;
      for (const auto& e : fs::recursive_directory_iterator(data_dir))
        if (e.is_regular_file()) m.inputs[fs::relative(e.path(), data_dir).generic_string()] = sha256_file(e.path());
      m.add_output(out_dir, "history.csv");
      m.save(fs::path(out_dir) / bundle_file::kManifest);
      out << "initial loss " << res.history.rows.front().total << "\nfinal loss " << res.history.rows.back().total << "\n";
      return kExitOk;
    };
  });

  std::vector<std::string> pos_clicks, neg_clicks;
  auto* click = app.add_subcommand("click", "propagate clicks through a bundle's hierarchy -> mask PGM");
  click->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  click->add_option("--at", pos_clicks, "positive click x,y (repeatable)");
  click->add_option("--neg", neg_clicks, "negative click x,y (repeatable)");
  click->add_option("--level", level, "target level")->capture_default_str();
  click->add_option("--out", out_dir, "output directory")->required();
  click->callback([&] {
    action = [&] {
      ClickSet cs;
      cs.level = level;
      for (const auto& s : pos_clicks) cs.clicks.push_back({parse_point(s).first, parse_point(s).second, true});
      for (const auto& s : neg_clicks) cs.clicks.push_back({parse_point(s).first, parse_point(s).second, false});
      const auto b = load_bundle(bundle_dir);
      const auto mask = click_propagate(b.hierarchy, b.superpixels, cs);
      fs::create_directories(out_dir);
      write_file(fs::path(out_dir) / "mask.pgm", encode_pgm(mask.height, mask.width, mask_pixels(mask)));
      write_file(fs::path(out_dir) / "mask.json", rle_encode(mask.height, mask.width, mask.data).dump() + "\n");
      Manifest m;
      m.command = "click";
      m.config = {{"level", level}, {"positive", pos_clicks}, {"negative", neg_clicks}};
      m.inputs["hierarchy"] = sha256_file(fs::path(bundle_dir) / bundle_file::kHierarchy);
      m.inputs["superpixels"] = sha256_file(fs::path(bundle_dir) / bundle_file::kSuperpixels);
      m.add_output(out_dir, "mask.pgm");
      m.add_output(out_dir, "mask.json");
      m.save(fs::path(out_dir) / bundle_file::kManifest);
      out << "selected " << mask.count() << " of " << mask.data.size() << " pixels\n";
      return kExitOk;
    };
  });

  std::optional<std::size_t> cam_level;
  auto* cam = app.add_subcommand("gradcam", "render a bundle's Grad-CAM heat maps as PGMs");
  cam->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  cam->add_option("--level", cam_level, "single level (default: all)");
  cam->add_option("--out", out_dir, "output directory")->required();
  cam->callback([&] {
    action = [&] {
      const auto b = load_bundle(bundle_dir);
      if (b.gradcam.empty()) throw Error(ErrorCode::Io, "bundle has no gradcam.json; produce it with `pipeline`");
      const std::size_t lo = cam_level.value_or(1), hi = cam_level.value_or(b.hierarchy.num_levels());
      if (lo < 1 || hi > b.hierarchy.num_levels()) throw Error(ErrorCode::LevelOutOfRange, "level out of range");
      fs::create_directories(out_dir);
      Manifest m;
      m.command = "gradcam";
      m.config = {{"levels", {lo, hi}}};
      m.inputs["gradcam"] = sha256_file(fs::path(bundle_dir) / bundle_file::kGradcam);
      m.inputs["hierarchy"] = sha256_file(fs::path(bundle_dir) / bundle_file::kHierarchy);
      for (std::size_t l = lo; l <= hi; ++l) {
        const auto anc = hard_assignment(b.hierarchy, l);
        std::vector<double> px(b.superpixels.labels.size());
        for (std::size_t i = 0; i < px.size(); ++i)
          px[i] = b.gradcam[l - 1][static_cast<std::size_t>(anc[static_cast<std::size_t>(b.superpixels.labels[i])])];
        const std::string name = "gradcam_" + std::to_string(l) + ".pgm";
        write_file(fs::path(out_dir) / name, encode_pgm(b.superpixels.height, b.superpixels.width, heat_pixels(px)));
        m.add_output(out_dir, name);
      }
      m.save(fs::path(out_dir) / bundle_file::kManifest);
      out << "wrote " << (hi - lo + 1) << " heat maps\n";
      return kExitOk;
    };
  });

  std::size_t image_size = 768, channels = 12;
  std::optional<std::size_t> n1;
  bool as_json = false;
  auto* flops = app.add_subcommand("flops", "analytic multiply-add and parameter counts vs a dense non-local block");
  rf.add_to(*flops);
  flops->add_option("--image-size", image_size, "square input side")->check(CLI::Range(32, 1 << 16))->capture_default_str();
  flops->add_option("--channels", channels, "channels per feature level")->check(CLI::Range(1, 1 << 16))->capture_default_str();
  flops->add_option("--n1", n1, "superpixel count (default: --max-superpixels)");
  flops->add_flag("--json", as_json, "print JSON instead of a table");
  flops->add_option("--out", out_dir, "also write cost.json and a manifest here");
  flops->callback([&] {
    action = [&] {
      const auto cfg = rf.resolve();
      auto setup = desk_cost_setup(cfg, image_size, channels);
      if (n1) setup.n1 = *n1;
      const auto dgm = count_dgm(cfg, setup.resolutions, setup.channels, setup.n1);
      auto off = cfg;
      off.tdmp_enabled = false;
      const auto no_tdmp = count_dgm(off, setup.resolutions, setup.channels, setup.n1);
      const auto& r1 = setup.resolutions.front();
      const auto nl = count_nonlocal(r1.height, r1.width, channels);
      const double ratio = static_cast<double>(nl.total_madds()) / static_cast<double>(dgm.total_madds());
      const double tdmp_share = cfg.tdmp_enabled ? static_cast<double>(dgm.total_madds() - no_tdmp.total_madds()) /
                                                       static_cast<double>(dgm.total_madds())
                                                 : 0.0;
      const json j = {{"dgm", dgm.to_json()}, {"nonlocal", nl.to_json()}, {"nonlocal_over_dgm", ratio}, {"tdmp_share", tdmp_share}};
      if (as_json) {
        out << j.dump(2) << "\n";
      } else {
        out << dgm.to_text() << nl.to_text() << "nonlocal / dgm      " << ratio << "\ntdmp share of dgm   " << tdmp_share << "\n";
      }
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "cost.json", j.dump(2) + "\n");
        Manifest m;
        m.command = "flops";
        m.config = config_to_json(cfg);
        m.config["image_size"] = image_size;
        m.config["channels"] = channels;
        m.config["n1"] = setup.n1;
        m.seed = cfg.seed;
        m.add_output(out_dir, "cost.json");
        m.save(fs::path(out_dir) / bundle_file::kManifest);
      }
      return kExitOk;
    };
  });

  std::uint64_t gc_seed = 0;
  double eps = 1e-5, tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "analytic vs finite-difference gradients on a small full pipeline");
  gc->add_option("--seed", gc_seed, "instance seed")->capture_default_str();
  gc->add_option("--eps", eps, "finite-difference step")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--tolerance", tol, "maximum relative error")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--out", out_dir, "also write report.json and a manifest here");
  gc->callback([&] {
    action = [&] {
      const auto g = make_gradcheck_instance(gc_seed);
      const auto r = run_gradcheck(g, eps);
      const json j = {{"max_rel_error", r.max_rel_error}, {"parameter_entries", r.parameter_entries},
                      {"min_relu_margin", r.min_relu_margin}, {"loss", r.loss}, {"tolerance", tol},
                      {"pass", r.max_rel_error < tol}};
      out << j.dump(2) << "\n";
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_file(fs::path(out_dir) / "report.json", j.dump(2) + "\n");
        Manifest m;
        m.command = "gradcheck";
        m.config = {{"eps", eps}, {"tolerance", tol}, {"instance", config_to_json(g.config)}};
        m.seed = gc_seed;
        m.add_output(out_dir, "report.json");
        m.save(fs::path(out_dir) / bundle_file::kManifest);
      }
      return r.max_rel_error < tol ? kExitOk : kExitData;
    };
  });

  std::string host = "127.0.0.1", static_dir;
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "serve a bundle over the HTTP API");
  serve->add_option("--bundle", bundle_dir, "bundle directory")->required()->check(CLI::ExistingDirectory);
  serve->add_option("--host", host, "bind address")->capture_default_str();
  serve->add_option("--port", port, "port (0 picks a free one)")->check(CLI::Range(0, 65535))->capture_default_str();
  serve->add_option("--static", static_dir, "directory served under /")->check(CLI::ExistingDirectory);
  serve->callback([&] {
    action = [&] {
      const auto b = load_bundle(bundle_dir);
      httplib::Server srv;
      install_routes(srv, b, static_dir.empty() ? std::nullopt : std::optional<fs::path>(static_dir));
      const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
      if (bound < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
      out << "serving " << bundle_dir << " on http://" << host << ":" << bound << "\n" << std::flush;
      srv.listen_after_bind();
      return kExitOk;
    };
  });

  std::uint64_t fx_seed = 7;
  std::size_t fx_count = 8;
  auto* fixture = app.add_subcommand("fixture", "write the synthetic toy dataset and small sample inputs");
  fixture->add_option("--out", out_dir, "output directory")->required();
  fixture->add_option("--seed", fx_seed, "dataset seed")->capture_default_str();
  fixture->add_option("--count", fx_count, "number of samples")->check(CLI::Range(1, 10000))->capture_default_str();
  fixture->callback([&] {
    action = [&] {
      const fs::path root(out_dir);
      write_synthetic_dataset(root / "toy_dataset", fx_count, fx_seed);
      const auto four = make_synthetic_images(1, fx_seed + 1).front();
      fs::create_directories(root / "four_region");
      write_file(root / "four_region" / "image.ppm", encode_ppm(four.image));
      save_tensor(root / "four_region" / "superpixels.dgmt", label_map_tensor(four.superpixels));
      const std::uint32_t n = kSyntheticSize;
      fs::create_directories(root / "single_region");
      write_file(root / "single_region" / "image.ppm", encode_ppm(four.image));
      save_tensor(root / "single_region" / "superpixels.dgmt",
                  Tensor::make_i32({n, n}, std::vector<std::int32_t>(static_cast<std::size_t>(n) * n, 0)));
      out << "wrote fixtures under " << root.string() << "\n";
      return kExitOk;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code != 0) err << app.help();
    return code == 0 ? kExitOk : kExitUsage;
  }
  try {
    return action ? action() : kExitUsage;
  } catch (const CLI::ValidationError& e) {
    err << "dgm: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "dgm: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "dgm: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace dgm::cli
