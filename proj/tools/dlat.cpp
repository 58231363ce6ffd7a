// dlat — command-line driver for the DLAT+ diverse lifespan aging toolkit.
//
// Subcommands: fit-pca, train, infer, eval, sim-table.  Exit codes:
//   0 success, 2 usage, 3 IO/schema error, 4 numeric failure, 5 remote oracle.

#include <CLI11.hpp>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dlat/dataset_io.hpp"
#include "dlat/fusion.hpp"
#include "dlat/metrics.hpp"
#include "dlat/oracles.hpp"
#include "dlat/remote.hpp"
#include "dlat/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dlat;

namespace {

AgeGroup parse_group(const std::string& bounds) {
  try {
    return group_from_bounds(bounds);
  } catch (const DomainError&) {
    throw IoError("unknown age group \"" + bounds + "\" (expected e.g. \"0-2\", \"70+\")");
  }
}

std::vector<AgeGroup> parse_targets(const std::string& list) {
  std::vector<AgeGroup> out;
  std::istringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_group(item));
  if (out.empty()) throw IoError("--targets is empty");
  return out;
}

RemoteVerifierConfig remote_config(const std::string& path) {
  RemoteVerifierConfig rc;
  if (path.empty())
    throw IoError("remote oracle requires --remote-config (keys: host, port, path, "
                  "timeout_seconds, max_retries, backoff_ms, min_interval_ms, api_key_env)");
  const Config c = Config::load(path);
  rc.host = c.str("host", rc.host);
  rc.port = c.integer("port", rc.port);
  rc.path = c.str("path", rc.path);
  rc.api_key_env = c.str("api_key_env", rc.api_key_env);
  rc.timeout_seconds = c.integer("timeout_seconds", rc.timeout_seconds);
  rc.max_retries = c.integer("max_retries", rc.max_retries);
  rc.backoff_ms = c.integer("backoff_ms", rc.backoff_ms);
  rc.min_interval_ms = c.integer("min_interval_ms", rc.min_interval_ms);
  if (rc.host.empty()) throw IoError("remote config is missing \"host\"");
  return rc;
}

// --- fit-pca ---------------------------------------------------------------

int cmd_fit_pca(const std::string& dir, const std::string& gender, const std::string& out) {
  const auto sets = load_landmark_dataset(dir, gender_from_string(gender));
  const PcaBasis basis = fit_pca(sets);
  fs::create_directories(out);
  json m;
  m["version"] = "dlat-pca-1";
  m["samples"] = sets.size();
  m["mean"] = ckpt::save_tensor(out, "pca_mean", basis.mean);
  m["components"] = ckpt::save_tensor(out, "pca_components", basis.components);
  m["variances"] = ckpt::save_tensor(out, "pca_variances", basis.variances);
  ckpt::save_manifest(out, m);
  std::cout << "fitted 32-component basis from " << sets.size() << " landmark sets -> " << out
            << "\n";
  return 0;
}

PcaBasis load_pca(const std::string& dir) {
  const json m = ckpt::load_manifest(dir);
  if (m.at("version").get<std::string>() != "dlat-pca-1")
    throw IoError("unsupported PCA basis version in " + dir);
  PcaBasis b;
  b.mean = ckpt::load_tensor(dir, m.at("mean"));
  b.components = ckpt::load_tensor(dir, m.at("components"));
  b.variances = ckpt::load_tensor(dir, m.at("variances"));
  b.check();
  return b;
}

// --- train -----------------------------------------------------------------

int cmd_train(const std::string& net, const std::string& gender, const std::string& config_path,
              const std::string& out, const std::string& resume) {
  const Config cfg = Config::load(config_path);
  if (!cfg.has("dataset")) throw IoError("config is missing \"dataset\"");
  const std::string dataset = cfg.str("dataset");
  const int64_t steps = cfg.integer("steps", 200);
  const int64_t interval = cfg.integer("checkpoint_interval", static_cast<int>(steps));
  const uint64_t seed = static_cast<uint64_t>(cfg.integer("seed", 0));
  const int k = cfg.integer("k", 3);
  const std::optional<Gender> g = gender_from_string(gender);

  fs::create_directories(out);
  detail::LossLog log;

  if (net == "img") {
    const auto images = load_image_dataset(dataset, g);
    ImgTrainState st;
    if (!resume.empty()) {
      st = ImgTrainState::load(resume);
    } else {
      st.seed = seed;
      st.rng.seed(seed);
      st.hp = cfg.hyper_params();
      Rng init(seed);
      st.model = std::make_unique<ImgModel>(cfg.integer("resolution", 64), k, init);
    }
    const MockOracles oracles(static_cast<uint64_t>(cfg.integer("oracle_seed", 0)));
    log.open(fs::path(out) / "train_log.csv", img_log_columns(), !resume.empty());
    for (int64_t done = 0; done < steps;) {
      const int64_t chunk = std::min<int64_t>(interval, steps - done);
      train_img_steps(st, images, oracles, chunk, log);
      done += chunk;
      st.save(out);
    }
    std::cout << "img training at step " << st.step << " -> " << out << "\n";
  } else if (net == "lmk") {
    const auto sets = load_landmark_dataset(dataset, g);
    LmkTrainState st;
    if (!resume.empty()) {
      st = LmkTrainState::load(resume);
    } else {
      st.seed = seed;
      st.rng.seed(seed);
      st.hp = cfg.hyper_params();
      Rng init(seed);
      st.model = std::make_unique<LmkModel>(k, init);
      st.model->basis = cfg.has("pca") ? load_pca(cfg.str("pca")) : fit_pca(sets);
      st.group_means = landmark_group_means(sets);
    }
    log.open(fs::path(out) / "train_log.csv", lmk_log_columns(), !resume.empty());
    for (int64_t done = 0; done < steps;) {
      const int64_t chunk = std::min<int64_t>(interval, steps - done);
      train_lmk_steps(st, sets, chunk, log);
      done += chunk;
      st.save(out);
    }
    std::cout << "lmk training at step " << st.step << " -> " << out << "\n";
  } else {
    throw IoError("--net must be img or lmk, got \"" + net + "\"");
  }
  return 0;
}

// --- infer -----------------------------------------------------------------

int cmd_infer(const std::string& ckpt_img, const std::string& ckpt_lmk, const std::string& input,
              const std::string& landmarks, const std::string& targets_list, int samples,
              bool fuse, bool tps, uint64_t seed, const std::string& out) {
  if (samples < 1) throw IoError("--samples must be >= 1");
  const ImgTrainState img = ImgTrainState::load(ckpt_img);
  const LmkTrainState lmk = LmkTrainState::load(ckpt_lmk);
  FaceImage x = read_png(input);
  if (x.side() != img.model->resolution)
    throw IoError("input image is " + std::to_string(x.side()) + "px but the checkpoint expects " +
                  std::to_string(img.model->resolution));
  const LandmarkSet l_x = read_landmarks_csv(landmarks);
  const std::vector<AgeGroup> targets = parse_targets(targets_list);
  for (const AgeGroup& t : targets) {
    try {
      detail::head_of_group(t, std::min(img.model->k, lmk.model->k));
    } catch (const DomainError&) {
      throw IoError("target group " + t.bounds_str() + " has no trained head (K=" +
                    std::to_string(std::min(img.model->k, lmk.model->k)) + ")");
    }
  }

  fs::create_directories(out);
  Rng rng(seed);
  for (int s = 0; s < samples; ++s) {
    const Tensor noise = sample_noise(rng);
    for (const AgeGroup& t : targets) {
      const int head = detail::head_of_group(t, img.model->k);
      const FusionResult r =
          dlat_plus_infer(x, l_x, noise, head, img.model->mapper, img.model->gen,
                          lmk.model->mapper, lmk.model->gen, lmk.model->basis, tps);
      const std::string stem = "y_" + std::string(1, t.label()) + "_s" + std::to_string(s);
      write_png((fs::path(out) / (stem + ".png")).string(), fuse ? r.image : r.raw_image);
      json side;
      side["seed"] = seed;
      side["sample"] = s;
      side["group"] = t.bounds_str();
      side["fused"] = fuse;
      side["tps"] = tps;
      side["warp"] = std::vector<double>(r.warp.data.begin(), r.warp.data.end());
      side["landmarks"] = std::vector<double>(r.landmarks.points.data.begin(),
                                              r.landmarks.points.data.end());
      std::ofstream js(fs::path(out) / (stem + ".json"));
      js << side.dump(2) << "\n";
      if (!js) throw IoError("cannot write sidecar for " + stem);
    }
  }
  std::cout << "wrote " << samples * static_cast<int>(targets.size()) << " images -> " << out
            << "\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalRow {
  std::string source;       // path, may be empty when similarity is given
  std::string synthesis;    // path
  std::optional<AgeGroup> source_group;
  AgeGroup target_group;
  std::optional<double> similarity;  // precomputed s-hat, bypasses the verifier
};

std::vector<EvalRow> read_eval_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open eval manifest: " + path);
  const fs::path dir = fs::path(path).parent_path();
  std::string line;
  if (!std::getline(in, line)) throw IoError("eval manifest is empty: " + path);
  auto split = [](const std::string& s) {
    std::vector<std::string> cells;
    std::istringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (!cell.empty() && cell.back() == '\r') cell.pop_back();
      cells.push_back(cell);
    }
    return cells;
  };
  const auto header = split(line);
  auto col = [&](const std::string& name) -> int {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int c_src = col("source"), c_sg = col("source_group");
  const int c_tg = col("target_group"), c_syn = col("synthesis"), c_sim = col("similarity");
  if (c_tg < 0) throw IoError("eval manifest missing required column \"target_group\": " + path);
  std::vector<EvalRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto cells = split(line);
    auto cell = [&](int c) -> std::string {
      return (c >= 0 && c < static_cast<int>(cells.size())) ? cells[static_cast<size_t>(c)]
                                                            : std::string();
    };
    EvalRow r{.source = cell(c_src),
              .synthesis = cell(c_syn),
              .source_group = std::nullopt,
              .target_group = parse_group(cell(c_tg)),
              .similarity = std::nullopt};
    if (!r.source.empty()) r.source = (dir / r.source).string();
    if (!r.synthesis.empty()) r.synthesis = (dir / r.synthesis).string();
    if (!cell(c_sg).empty()) r.source_group = parse_group(cell(c_sg));
    if (!cell(c_sim).empty()) {
      try {
        r.similarity = std::stod(cell(c_sim));
      } catch (const std::exception&) {
        throw IoError("eval manifest row " + std::to_string(n) + " has a bad similarity cell");
      }
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw IoError("eval manifest has no data rows: " + path);
  return rows;
}

void write_json_report(const std::string& out, const json& report) {
  std::ofstream js(out);
  js << report.dump(2) << "\n";
  if (!js) throw IoError("cannot write report: " + out);
}

int cmd_eval(const std::string& metric, const std::string& manifest_path,
             const std::string& table_path, const std::string& oracle,
             const std::string& remote_cfg, uint64_t seed, const std::string& out) {
  const auto rows = read_eval_manifest(manifest_path);
  const MockOracles mock(seed);
  json report;
  report["metric"] = metric;
  report["seed"] = seed;

  if (metric == "idag") {
    if (table_path.empty()) throw IoError("eval idag requires --table");
    SimilarityTable table = SimilarityTable::load_csv(table_path);
    std::optional<RemoteVerifier> remote;
    if (oracle == "remote") remote.emplace(remote_config(remote_cfg));
    std::vector<EvalRecord> records;
    std::map<std::string, FaceImage> cache;
    auto image = [&](const std::string& p) -> const FaceImage& {
      auto it = cache.find(p);
      if (it == cache.end()) it = cache.emplace(p, read_png(p)).first;
      return it->second;
    };
    for (size_t i = 0; i < rows.size(); ++i) {
      const EvalRow& r = rows[i];
      if (!r.source_group)
        throw IoError("eval idag: manifest row " + std::to_string(i + 2) +
                      " is missing source_group");
      double s_hat;
      if (r.similarity) {
        s_hat = *r.similarity;
      } else {
        if (r.source.empty() || r.synthesis.empty())
          throw IoError("eval idag: manifest row " + std::to_string(i + 2) +
                        " needs source+synthesis paths or a similarity cell");
        s_hat = remote ? remote->verify(image(r.source), image(r.synthesis),
                                        r.source + "|" + r.synthesis)
                       : mock.verify(image(r.source), image(r.synthesis));
      }
      records.push_back(EvalRecord{r.source.empty() ? "row" + std::to_string(i) : r.source,
                                   *r.source_group, r.target_group, s_hat, 0.0});
    }
    RecordBuild rb = attach_table_means(std::move(records), table);
    std::set<std::string> sources;
    std::set<int> targets;
    for (const auto& r : rb.records) {
      sources.insert(r.source_id);
      targets.insert(r.target_group.index);
    }
    const int n = static_cast<int>(sources.size()), m = static_cast<int>(targets.size());
    report["idag"] = idag(rb.records, n, m);
    report["n"] = n;
    report["m"] = m;
    report["per_source_group"] = idag_by_source_group(rb.records);
    report["warnings"] = rb.warnings;
  } else if (metric == "mae") {
    if (oracle != "mock") throw IoError("eval mae supports only the mock oracle");
    std::vector<double> ages;
    std::vector<AgeGroup> groups;
    for (const auto& r : rows) {
      if (r.synthesis.empty()) throw IoError("eval mae: manifest row missing synthesis path");
      ages.push_back(mock.age(read_png(r.synthesis)));
      groups.push_back(r.target_group);
    }
    report["mae"] = age_mae(ages, groups);
    report["n"] = ages.size();
  } else if (metric == "diversity") {
    if (oracle != "mock") throw IoError("eval diversity supports only the mock oracle");
    // Rows sharing (source, target_group) form one diversity set.
    std::map<std::pair<std::string, int>, std::vector<FaceImage>> sets;
    for (const auto& r : rows) {
      if (r.synthesis.empty())
        throw IoError("eval diversity: manifest row missing synthesis path");
      sets[{r.source, r.target_group.index}].push_back(read_png(r.synthesis));
    }
    PerceptualDistance dist = [&](const FaceImage& a, const FaceImage& b) {
      const auto fa = mock.perceptual(a), fb = mock.perceptual(b);
      double acc = 0.0;
      for (size_t i = 0; i < fa.size(); ++i)
        acc += (fa[i].vec() - fb[i].vec()).cwiseAbs().mean();
      return acc / static_cast<double>(fa.size());
    };
    double acc = 0.0;
    for (const auto& [key, imgs] : sets) acc += pairwise_diversity(imgs, dist);
    report["diversity"] = acc / static_cast<double>(sets.size());
    report["sets"] = sets.size();
  } else {
    throw IoError("unknown eval metric \"" + metric + "\" (idag|mae|diversity)");
  }
  write_json_report(out, report);
  std::cout << metric << " report -> " << out << "\n";
  return 0;
}

// --- sim-table -------------------------------------------------------------

int cmd_sim_table(const std::string& dataset, const std::string& oracle,
                  const std::string& remote_cfg, uint64_t seed, const std::string& out) {
  const auto items = read_manifest((fs::path(dataset) / "manifest.csv").string());
  std::map<std::string, SubjectFaces> by_subject;
  for (const auto& it : items) {
    if (it.subject.empty() || it.image_path.empty()) continue;
    FaceImage img = read_png(it.image_path);
    img.group = it.group;
    auto& s = by_subject[it.subject];
    s.subject = it.subject;
    s.faces.push_back(std::move(img));
  }
  if (by_subject.empty())
    throw IoError("dataset manifest has no rows with both subject and image: " + dataset);
  std::vector<SubjectFaces> subjects;
  for (auto& [name, s] : by_subject) subjects.push_back(std::move(s));

  const MockOracles mock(seed);
  std::optional<RemoteVerifier> remote;
  if (oracle == "remote") remote.emplace(remote_config(remote_cfg));
  FaceVerifier verifier =
      remote ? remote->as_verifier()
             : FaceVerifier([&](const FaceImage& a, const FaceImage& b) { return mock.verify(a, b); });

  const SimilarityTable table = build_similarity_table(subjects, verifier);
  table.save_csv(out);
  std::cout << "similarity table from " << subjects.size() << " subjects -> " << out << "\n";
  return 0;
}

bool caused_by_remote(const std::exception& e) {
  if (dynamic_cast<const RemoteOracleError*>(&e)) return true;
  try {
    std::rethrow_if_nested(e);
  } catch (const std::exception& inner) {
    return caused_by_remote(inner);
  } catch (...) {
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DLAT+ diverse lifespan face aging toolkit"};
  app.require_subcommand(1);

  // fit-pca
  auto* fit = app.add_subcommand("fit-pca", "Fit the 32-component landmark PCA basis");
  std::string fp_dir, fp_gender, fp_out;
  fit->add_option("--landmarks", fp_dir, "Landmark dataset directory")->required();
  fit->add_option("--gender", fp_gender, "Gender filter: m or f")->required();
  fit->add_option("--out", fp_out, "Output basis directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a sub-network on a labeled dataset");
  std::string tr_net, tr_gender, tr_config, tr_out, tr_resume;
  train->add_option("--net", tr_net, "Sub-network: img or lmk")->required();
  train->add_option("--gender", tr_gender, "Gender filter: m or f")->required();
  train->add_option("--config", tr_config,
                    "Key-value config (dataset, steps, seed, k, resolution, "
                    "checkpoint_interval, pca, oracle_seed, hyper-parameters)")
      ->required();
  train->add_option("--out", tr_out, "Checkpoint/log output directory")->required();
  train->add_option("--resume", tr_resume, "Resume from this checkpoint directory");

  // infer
  auto* infer = app.add_subcommand("infer", "Generate aged faces with landmark-driven fusion");
  std::string in_ci, in_cl, in_img, in_lmk, in_targets, in_out;
  int in_samples = 1;
  bool in_fuse = false, in_tps = false;
  uint64_t in_seed = 0;
  infer->add_option("--ckpt-img", in_ci, "Image-network checkpoint directory")->required();
  infer->add_option("--ckpt-lmk", in_cl, "Landmark-network checkpoint directory")->required();
  infer->add_option("--input", in_img, "Source face PNG")->required();
  infer->add_option("--landmarks", in_lmk, "Source landmark CSV (81 rows x,y)")->required();
  infer->add_option("--targets", in_targets, "Comma-separated target groups, e.g. 0-2,50-69")
      ->required();
  infer->add_option("--samples", in_samples, "Diverse samples per target group");
  infer->add_flag("--fuse", in_fuse, "Write the landmark-warped fusion output");
  infer->add_flag("--tps", in_tps, "Use thin-plate-spline warping instead of affine");
  infer->add_option("--seed", in_seed, "Noise seed (echoed into sidecars)");
  infer->add_option("--out", in_out, "Output directory")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate synthesis results (idag|mae|diversity)");
  std::string ev_metric, ev_manifest, ev_table, ev_oracle = "mock", ev_remote, ev_out;
  uint64_t ev_seed = 0;
  eval->add_option("metric", ev_metric, "idag, mae, or diversity")->required();
  eval->add_option("--manifest", ev_manifest,
                   "CSV: source,source_group,target_group,synthesis[,similarity]")
      ->required();
  eval->add_option("--table", ev_table, "Similarity-table CSV (required for idag)");
  eval->add_option("--oracle", ev_oracle, "mock or remote");
  eval->add_option("--remote-config", ev_remote, "Remote verifier config file");
  eval->add_option("--seed", ev_seed, "Mock-oracle seed (echoed into the report)");
  eval->add_option("--out", ev_out, "Output JSON report path")->required();

  // sim-table
  auto* sim = app.add_subcommand("sim-table", "Similarity-table operations");
  auto* sim_build = sim->add_subcommand("build", "Build a table from a subject-labeled dataset");
  std::string st_dataset, st_oracle = "mock", st_remote, st_out;
  uint64_t st_seed = 0;
  sim_build->add_option("--dataset", st_dataset, "Dataset directory with manifest.csv")
      ->required();
  sim_build->add_option("--oracle", st_oracle, "mock or remote");
  sim_build->add_option("--remote-config", st_remote, "Remote verifier config file");
  sim_build->add_option("--seed", st_seed, "Mock-oracle seed");
  sim_build->add_option("--out", st_out, "Output CSV path")->required();
  sim->require_subcommand(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*fit) return cmd_fit_pca(fp_dir, fp_gender, fp_out);
    if (*train) return cmd_train(tr_net, tr_gender, tr_config, tr_out, tr_resume);
    if (*infer)
      return cmd_infer(in_ci, in_cl, in_img, in_lmk, in_targets, in_samples, in_fuse, in_tps,
                       in_seed, in_out);
    if (*eval)
      return cmd_eval(ev_metric, ev_manifest, ev_table, ev_oracle, ev_remote, ev_seed, ev_out);
    if (*sim_build) return cmd_sim_table(st_dataset, st_oracle, st_remote, st_seed, st_out);
    std::cerr << "error: no subcommand selected\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    if (caused_by_remote(e)) return 5;
    if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DegenerateInput*>(&e))
      return 4;
    return 3;
  }
}
