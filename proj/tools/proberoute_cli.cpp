// Copyright 2026 The proberoute Authors
// SPDX-License-Identifier: Apache-2.0

// proberoute: generate, train, evaluate and route with hidden-state probes.
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical abort.
// Failures print a single line `proberoute: error: <kind>: <message>`.

#include <atomic>
#include <charconv>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "proberoute/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace proberoute {
namespace {

// Shortest round-trip text, so equal doubles always print the same bytes.
std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write '" + path.string() + "'");
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_bytes(p.string()))); }

// Everything a subcommand needs after flag parsing.
struct Context {
  std::string command;
  RunConfig config;
  fs::path out;
  std::vector<std::string> inputs;
};

/// Manifest next to the outputs: resolved config, its hash, the seed, format
/// versions and content hashes of inputs and outputs. Passing it back through
/// --manifest reruns with the same config.
void write_manifest(const Context& ctx, const std::string& stem, const std::vector<fs::path>& outputs) {
  json in = json::object(), outj = json::object();
  for (const auto& p : ctx.inputs) in[p] = file_hash(p);
  for (const auto& p : outputs) outj[p.filename().string()] = file_hash(p);
  const json m = {
      {"tool", "proberoute"},
      {"version", kToolVersion},
      {"command", ctx.command},
      {"seed", ctx.config.seed},
      {"config_hash", config_hash(ctx.config)},
      {"config", to_json(ctx.config)},
      {"formats", {{"dataset", kDatasetVersion}, {"checkpoint", kCheckpointVersion}}},
      {"inputs", in},
      {"outputs", outj},
  };
  write_text(ctx.out / (stem + ".manifest.json"), m.dump(2) + "\n");
}

Dataset select_split(const Dataset& ds, const RunConfig& c, const std::string& which,
                     std::vector<std::size_t>* indices) {
  std::vector<std::size_t> idx;
  if (which == "all") {
    idx.resize(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
  } else {
    const Split s = split_indices(ds.size(), c.test_fraction, c.seed);
    idx = which == "train" ? s.train : s.test;
  }
  if (indices) *indices = idx;
  return subset(ds, idx);
}

struct Scored {
  Checkpoint ckpt;
  BackboneWeights<float> backbone;
  Dataset data;
  std::vector<std::size_t> indices;
  FeatureStore<float> features;
  std::vector<RoutingSample> samples;
};

// Loads a checkpoint and scores the requested split with it. Returned by
// pointer because the feature store points into `data`.
std::unique_ptr<Scored> score_split(const Context& ctx, const std::string& data_path,
                                    const std::string& model_path, const std::string& split) {
  auto s = std::make_unique<Scored>();
  s->ckpt = load_checkpoint_file(model_path);
  s->backbone = init_backbone<float>(s->ckpt.backbone);
  s->data = select_split(load_file(data_path), ctx.config, split, &s->indices);
  if (s->data.size() == 0) throw DataError("split '" + split + "' is empty");
  s->features = build_features(s->data, s->backbone);
  s->samples = routing_samples(s->features, predict(s->ckpt.model, s->backbone, s->features));
  return s;
}

double auc_or_nan(const std::vector<RoutingSample>& rs) {
  std::vector<double> sc;
  std::vector<int> y;
  for (const auto& r : rs) {
    sc.push_back(r.score);
    y.push_back(r.small_correct);
  }
  return detail::safe_auc(sc, y);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen(const Context& ctx) {
  const Dataset ds = generate_synthetic(ctx.config.synthetic_config());
  const auto path = ctx.out / "data.rlpd";
  save_file(path.string(), ds);
  write_manifest(ctx, "gen", {path});
  std::size_t small = 0, large = 0, mm = 0;
  for (const auto& s : ds.samples) {
    small += s.small_correct;
    large += s.large_correct;
    mm += s.modality == Modality::kMultimodal;
  }
  std::cout << "wrote " << path.string() << ": m=" << ds.size() << " d=" << ds.dim << " multimodal=" << mm
            << " small_correct=" << small << " large_correct=" << large << "\n";
  return 0;
}

int cmd_train(const Context& ctx, const std::string& data_path) {
  const RunConfig& c = ctx.config;
  const Method m = c.train.method;
  const auto bb = init_backbone<float>(c.backbone_config());
  const Dataset train_set = select_split(load_file(data_path), c, "train", nullptr);
  const auto fs = build_features(train_set, bb);
  const auto res = train(fs, bb, c.train_config(m), c.model);

  std::ostringstream csv;
  csv << "epoch,train_loss,train_auc,val_auc\n";
  for (const auto& e : res.log) {
    csv << e.epoch << "," << num(e.train_loss) << "," << num(e.train_auc) << "," << num(e.val_auc) << "\n";
  }
  const std::string mname = to_string(m);
  const auto csv_path = ctx.out / ("epochs_" + mname + ".csv");
  write_text(csv_path, csv.str());
  if (res.abort_reason) throw NumericalError(*res.abort_reason);

  Checkpoint ck{c.backbone_config(), c.model, res.model, res.threshold};
  const auto model_path = ctx.out / ("model_" + mname + ".rlpc");
  save_checkpoint_file(model_path.string(), ck);
  write_manifest(ctx, "train_" + mname, {model_path, csv_path});
  const auto& last = res.log.back();
  std::cout << "trained " << mname << " on " << train_set.size() << " samples, " << res.log.size()
            << " epochs; final train_loss " << num(last.train_loss) << ", val_auc " << num(last.val_auc)
            << " (" << pct(last.val_auc) << "); threshold " << num(res.threshold) << "\n"
            << "wrote " << model_path.string() << " and " << csv_path.string() << "\n";
  return 0;
}

int cmd_eval(const Context& ctx, const std::string& data_path, const std::string& model_path,
             const std::string& split, bool perturb) {
  const auto s = score_split(ctx, data_path, model_path, split);
  const std::string mname = to_string(s->ckpt.model.method);
  std::ostringstream csv;
  csv << "subset,count,auc,auc_pct\n";
  std::cout << "method " << mname << ", split " << split << "\n"
            << "subset        count   auc      auc_x100\n";
  auto row = [&](const std::string& name, const std::vector<RoutingSample>& rs) {
    const double a = auc_or_nan(rs);
    csv << name << "," << rs.size() << "," << num(a) << "," << pct(a) << "\n";
    std::printf("%-12s %6zu   %-8.4f %s\n", name.c_str(), rs.size(), a, pct(a).c_str());
  };
  row("all", s->samples);
  for (auto mod : {Modality::kTextOnly, Modality::kMultimodal}) {
    std::vector<RoutingSample> part;
    for (const auto& r : s->samples) {
      if (r.modality == mod) part.push_back(r);
    }
    row(to_string(mod), part);
  }
  std::cout << std::flush;
  const auto eval_path = ctx.out / ("eval_" + mname + ".csv");
  write_text(eval_path, csv.str());
  std::vector<fs::path> outputs = {eval_path};

  if (perturb) {
    const double clean = auc(s->samples);
    const auto sets = perturbed_sets(s->data, s->backbone, default_perturbations(), ctx.config.seed);
    std::ostringstream rob;
    rob << "perturbation,magnitude,auc,auc_pct,drop,drop_pct\n";
    rob << "none,0," << num(clean) << "," << pct(clean) << ",0,0.00\n";
    std::vector<double> aucs;
    for (std::size_t k = 0; k < sets.specs.size(); ++k) {
      const double a = probe_auc(s->ckpt.model, s->backbone, sets.features[k]);
      aucs.push_back(a);
      rob << to_string(sets.specs[k].kind) << "," << num(sets.specs[k].magnitude) << "," << num(a) << ","
          << pct(a) << "," << num(clean - a) << "," << pct(clean - a) << "\n";
    }
    const double d = delta_auc(clean, aucs);
    const auto rob_path = ctx.out / ("robustness_" + mname + ".csv");
    write_text(rob_path, rob.str());
    outputs.push_back(rob_path);
    std::cout << "delta_auc " << num(d) << " (" << pct(d) << " points)\n";
  }
  write_manifest(ctx, "eval_" + mname, outputs);
  return 0;
}

int cmd_sweep(const Context& ctx, const std::string& data_path, const std::string& model_path,
              const std::string& split, const std::vector<double>& ratios) {
  const auto s = score_split(ctx, data_path, model_path, split);
  const auto res = sweep(s->samples, ratios);
  const std::string mname = to_string(s->ckpt.model.method);
  std::ostringstream csv;
  csv << "ratio,system_accuracy,count_routed\n";
  std::cout << "ratio    accuracy  acc_x100  routed\n";
  for (const auto& p : res) {
    csv << num(p.ratio) << "," << num(p.system_accuracy) << "," << p.count_routed << "\n";
    std::printf("%-8s %-9.4f %-9s %zu\n", num(p.ratio).c_str(), p.system_accuracy, pct(p.system_accuracy).c_str(),
                p.count_routed);
  }
  const auto path = ctx.out / ("sweep_" + mname + ".csv");
  write_text(path, csv.str());
  write_manifest(ctx, "sweep_" + mname, {path});
  return 0;
}

int cmd_route(const Context& ctx, const std::string& data_path, const std::string& model_path,
              const std::string& split) {
  const auto s = score_split(ctx, data_path, model_path, split);
  const double tau = s->ckpt.threshold;
  const std::string mname = to_string(s->ckpt.model.method);
  std::ostringstream csv;
  csv << "index,modality,score,route\n";
  std::size_t deferred = 0, correct = 0;
  for (std::size_t i = 0; i < s->samples.size(); ++i) {
    const auto& r = s->samples[i];
    const bool keep = route_decision(r.score, tau) == 1;
    deferred += !keep;
    correct += keep ? r.small_correct : r.large_correct;
    csv << s->indices[i] << "," << to_string(r.modality) << "," << num(r.score) << "," << (keep ? "small" : "large")
        << "\n";
  }
  const auto path = ctx.out / ("route_" + mname + ".csv");
  write_text(path, csv.str());
  write_manifest(ctx, "route_" + mname, {path});
  const double m = static_cast<double>(s->samples.size());
  std::cout << "threshold " << num(tau) << ": " << deferred << "/" << s->samples.size()
            << " deferred (ratio " << num(deferred / m) << "), system accuracy " << num(correct / m) << " ("
            << pct(correct / m) << ")\n";
  return 0;
}

int cmd_degradation(const Context& ctx, const std::string& data_path) {
  const Method m = ctx.config.train.method;
  const auto rows = degradation(load_file(data_path), ctx.config, m);
  std::ostringstream csv;
  csv << "modality,train_subset,auc\n";
  std::cout << "method " << to_string(m) << "\n"
            << "train_subset  eval_modality  auc      auc_x100\n";
  double matched[2] = {0, 0};
  for (const auto& r : rows) {
    csv << to_string(r.modality) << "," << r.train_subset << "," << num(r.auc) << "\n";
    std::printf("%-13s %-14s %-8.4f %s\n", r.train_subset.c_str(), to_string(r.modality), r.auc, pct(r.auc).c_str());
    if (r.train_subset == to_string(r.modality)) matched[static_cast<int>(r.modality)] = r.auc;
  }
  std::cout << "text_only vs multimodal (matched subsets): " << num(matched[0] - matched[1]) << " ("
            << pct(matched[0] - matched[1]) << " points)\n";
  const auto path = ctx.out / "degradation.csv";
  write_text(path, csv.str());
  write_manifest(ctx, "degradation", {path});
  return 0;
}

int cmd_ablate(const Context& ctx, const std::string& data_path, std::size_t seeds, std::size_t workers,
               const std::vector<double>& ranks, const std::vector<double>& layers, const std::vector<double>& betas) {
  if (seeds < 1) throw std::invalid_argument("ablate: --seeds must be >= 1");
  const Dataset ds = load_file(data_path);
  std::vector<AblationPoint> points;
  auto add = [&](const char* name, const std::vector<double>& values) {
    for (double v : values) {
      for (std::size_t s = 0; s < seeds; ++s) points.push_back({name, v, ctx.config.seed + s});
    }
  };
  add("lora_rank", ranks);
  add("probe_layer", layers);
  add("vib_beta", betas);
  // Check every point's config before spending time on any of them.
  for (const auto& p : points) {
    if ((p.param != "vib_beta" && (p.value < 1 || p.value != std::floor(p.value))) || p.value < 0) {
      throw std::invalid_argument("ablate: bad " + p.param + " value " + num(p.value));
    }
    RunConfig c = ctx.config;
    if (p.param == "probe_layer") c.backbone.probe_layer = static_cast<std::size_t>(p.value);
    c.validate();
  }

  // Independent, fully seeded points; results land at their grid index, so
  // output order does not depend on scheduling.
  std::vector<AblationResult> results(points.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= points.size()) return;
      try {
        results[i] = run_ablation_point(ds, ctx.config, points[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = points.size();
      }
    }
  };
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, points.size()); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::ostringstream csv, kl;
  csv << "param_name,param_value,seed,auc\n";
  kl << "param_name,param_value,seed,mean_kl\n";
  std::cout << "param         value    seed  auc      auc_x100  mean_kl\n";
  for (const auto& r : results) {
    const auto& p = r.point;
    csv << p.param << "," << num(p.value) << "," << p.seed << "," << num(r.auc) << "\n";
    kl << p.param << "," << num(p.value) << "," << p.seed << "," << num(r.mean_kl) << "\n";
    std::printf("%-13s %-8s %-5llu %-8.4f %-9s %.4f\n", p.param.c_str(), num(p.value).c_str(),
                static_cast<unsigned long long>(p.seed), r.auc, pct(r.auc).c_str(), r.mean_kl);
  }
  const auto path = ctx.out / "ablate.csv";
  const auto kl_path = ctx.out / "ablate_kl.csv";
  write_text(path, csv.str());
  write_text(kl_path, kl.str());
  write_manifest(ctx, "ablate", {path, kl_path});
  return 0;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

template <typename V>
struct Override {
  V value{};
  CLI::Option* opt = nullptr;
  bool given() const { return opt && opt->count() > 0; }
};

int run(int argc, char** argv) {
  CLI::App app{"Hidden-state probes for routing queries between a small and a large model."};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, manifest_path, out_dir = ".";
  app.add_option("--config", config_path, "JSON run config (flags override it)");
  app.add_option("--manifest", manifest_path, "rerun with the config stored in a manifest");
  app.add_option("--out", out_dir, "output directory")->capture_default_str();

  Override<std::uint64_t> seed;
  Override<double> lr, beta, alpha, test_fraction;
  Override<std::size_t> epochs, batch, rank, layer, num_samples;
  Override<std::string> method;
  seed.opt = app.add_option("--seed", seed.value, "run seed");
  lr.opt = app.add_option("--lr", lr.value, "learning rate");
  epochs.opt = app.add_option("--epochs", epochs.value, "training epochs");
  batch.opt = app.add_option("--batch-size", batch.value, "minibatch size");
  beta.opt = app.add_option("--beta", beta.value, "KL weight beta");
  rank.opt = app.add_option("--lora-rank", rank.value, "adapter rank r");
  alpha.opt = app.add_option("--lora-alpha", alpha.value, "adapter scale alpha");
  layer.opt = app.add_option("--probe-layer", layer.value, "probed layer l (1-based)");
  num_samples.opt = app.add_option("--num-samples", num_samples.value, "synthetic sample count");
  test_fraction.opt = app.add_option("--test-fraction", test_fraction.value, "held-out fraction");

  auto* gen = app.add_subcommand("gen", "write a synthetic dataset file");
  auto* tr = app.add_subcommand("train", "train a probe; writes a checkpoint and per-epoch CSV");
  auto* ev = app.add_subcommand("eval", "AUC on a split, optionally under perturbations");
  auto* sw = app.add_subcommand("sweep", "system accuracy over routing ratios");
  auto* rt = app.add_subcommand("route", "per-sample routing decisions at the calibrated threshold");
  auto* dg = app.add_subcommand("degradation", "per-modality training and evaluation");
  auto* ab = app.add_subcommand("ablate", "ReLope grid over adapter rank, probed layer and beta");

  std::string data_path, model_path, split = "test";
  bool perturb = false;
  std::vector<double> ratios = {0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1};
  std::vector<double> ranks = {2, 4, 8, 16}, layers = {1, 2, 3, 4}, betas = {0, 0.1, 0.5, 1, 5};
  std::size_t seeds = 1, workers = 0;
  for (auto* sc : {tr, ev, sw, rt, dg, ab}) sc->add_option("--data", data_path, "dataset file (default <out>/data.rlpd)");
  for (auto* sc : {tr, dg}) method.opt = sc->add_option("--method", method.value, "last_token|attention|relope");
  for (auto* sc : {ev, sw, rt}) {
    sc->add_option("--model", model_path, "checkpoint file")->required();
    sc->add_option("--split", split, "test|train|all")
        ->check(CLI::IsMember({"test", "train", "all"}))
        ->capture_default_str();
  }
  ev->add_flag("--perturb", perturb, "also report the AUC drop under the default perturbations");
  sw->add_option("--ratios", ratios, "comma-separated routing ratios in [0, 1]")->delimiter(',');
  ab->add_option("--seeds", seeds, "seeds per grid point, starting at the run seed")->capture_default_str();
  ab->add_option("--workers", workers, "worker threads (0: one per core)");
  ab->add_option("--ranks", ranks, "adapter ranks")->delimiter(',');
  ab->add_option("--layers", layers, "probed layers")->delimiter(',');
  ab->add_option("--betas", betas, "KL weights")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    throw std::invalid_argument(e.what());
  }

  Context ctx;
  ctx.command = app.get_subcommands().front()->get_name();
  if (!manifest_path.empty()) {
    json m;
    try {
      m = json::parse(read_bytes(manifest_path));
    } catch (const json::exception& e) {
      throw std::invalid_argument("manifest: " + std::string(e.what()));
    }
    if (!m.contains("config")) throw std::invalid_argument("manifest: no 'config' entry");
    ctx.config = run_config_from_json(m.at("config"));
  }
  if (!config_path.empty()) {
    json j;
    try {
      j = json::parse(read_bytes(config_path));
    } catch (const json::exception& e) {
      throw std::invalid_argument("config: " + std::string(e.what()));
    }
    ctx.config = run_config_from_json(j, ctx.config);
  }
  RunConfig& c = ctx.config;
  if (dg->parsed() && !method.given()) c.train.method = Method::kLastToken;
  if (method.given()) c.train.method = method_from_string(method.value);
  if (seed.given()) c.seed = seed.value;
  if (lr.given()) c.train.learning_rate = lr.value;
  if (epochs.given()) c.train.epochs = epochs.value;
  if (batch.given()) c.train.batch_size = batch.value;
  if (beta.given()) c.train.vib_beta = beta.value;
  if (rank.given()) c.model.lora_rank = rank.value;
  if (alpha.given()) c.model.lora_alpha = alpha.value;
  if (layer.given()) c.backbone.probe_layer = layer.value;
  if (num_samples.given()) c.synthetic.num_samples = num_samples.value;
  if (test_fraction.given()) c.test_fraction = test_fraction.value;
  c.validate();

  ctx.out = out_dir;
  fs::create_directories(ctx.out);
  if (data_path.empty()) data_path = (ctx.out / "data.rlpd").string();
  if (!gen->parsed()) ctx.inputs.push_back(data_path);
  if (!model_path.empty()) ctx.inputs.push_back(model_path);
  // Hash inputs now so a missing file fails before any work.
  for (const auto& p : ctx.inputs) file_hash(p);

  if (gen->parsed()) return cmd_gen(ctx);
  if (tr->parsed()) return cmd_train(ctx, data_path);
  if (ev->parsed()) return cmd_eval(ctx, data_path, model_path, split, perturb);
  if (sw->parsed()) return cmd_sweep(ctx, data_path, model_path, split, ratios);
  if (rt->parsed()) return cmd_route(ctx, data_path, model_path, split);
  if (dg->parsed()) return cmd_degradation(ctx, data_path);
  return cmd_ablate(ctx, data_path, seeds, workers, ranks, layers, betas);
}

void report(const char* kind, const std::string& msg) {
  std::string line = msg;
  for (auto& ch : line) {
    if (ch == '\n' || ch == '\r') ch = ' ';
  }
  std::cerr << "proberoute: error: " << kind << ": " << line << std::endl;
}

}  // namespace
}  // namespace proberoute

int main(int argc, char** argv) {
  using namespace proberoute;
  try {
    return run(argc, argv);
  } catch (const NumericalError& e) {
    report("numerical", e.what());
    return 3;
  } catch (const DataError& e) {
    report("data", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    report("data", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    report("usage", e.what());
    return 1;
  } catch (const std::exception& e) {
    report("internal", e.what());
    return 1;
  }
}
