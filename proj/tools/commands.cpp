#include "commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "dcar/checkpoint.hpp"
#include "dcar/config.hpp"
#include "dcar/data.hpp"
#include "dcar/errors.hpp"
#include "dcar/evaluator.hpp"
#include "dcar/generator_trainer.hpp"
#include "dcar/log.hpp"
#include "dcar/sampler.hpp"
#include "dcar/tokenizer_trainer.hpp"

namespace dcar::cli {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::vector<std::string> overrides;
  std::string log_level = "info";
};

// "a.b.c=value"; value parsed as JSON, falling back to a plain string.
void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  const auto path = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  (*node)[parts.back()] = value;
}

ExperimentConfig resolve_config(const Globals& g) {
  json j = json::object();
  if (!g.config.empty()) {
    std::ifstream is(g.config);
    if (!is) throw ConfigError("cannot open config " + g.config);
    try {
      j = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + g.config + ": " + e.what());
    }
  } else {
    j = json(ExperimentConfig{});
  }
  for (const auto& o : g.overrides) apply_override(j, o);
  ExperimentConfig cfg;
  from_json(j, cfg);
  if (g.seed) cfg.apply_seed(*g.seed);
  cfg.validate();
  return cfg;
}

log::Level parse_level(const std::string& s) {
  if (s == "debug") return log::Level::debug;
  if (s == "info") return log::Level::info;
  if (s == "warn") return log::Level::warn;
  if (s == "error") return log::Level::error;
  if (s == "off") return log::Level::off;
  throw ConfigError("unknown log level '" + s + "'");
}

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

class JsonLines {
 public:
  explicit JsonLines(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    os_.open(path, std::ios::app);
    if (!os_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const json& j) { os_ << j.dump() << "\n" << std::flush; }

 private:
  std::ofstream os_;
};

std::vector<int64_t> parse_int_list(const std::string& s) {
  std::vector<int64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw ConfigError("expected a comma-separated integer list, got '" + s + "'");
    }
  }
  return out;
}

// ---- tokenizer ----------------------------------------------------------

int stage_number(Stage s) {
  switch (s) {
    case Stage::continuous_warmup: return 1;
    case Stage::discrete_learning: return 2;
    default: return 3;
  }
}

fs::path stage_checkpoint_path(const fs::path& out, Stage s) {
  return out / ("tokenizer_stage" + std::to_string(stage_number(s)) + ".ckpt");
}

Checkpoint trainer_checkpoint(TokenizerTrainer& trainer, Stage stage, const ExperimentConfig& cfg) {
  json meta = {{"stage", stage_number(stage)},
               {"stage_name", to_string(stage)},
               {"strategy", to_string(trainer.strategy())},
               {"config_hash", config_hash(json(cfg))},
               {"seed", cfg.seed}};
  auto ckpt = tokenizer_checkpoint(trainer.model(), meta, trainer.rng().state());
  collect_state(*trainer.discriminator(), "discriminator.", ckpt.tensors);
  return ckpt;
}

struct TokenizerRun {
  std::map<Stage, std::vector<EpochMetrics>> metrics;
  std::vector<fs::path> checkpoints;
};

TokenizerRun train_tokenizer(const ExperimentConfig& cfg, Strategy strategy, const std::string& selector,
                             const fs::path& out) {
  const auto plan = stage_plan(strategy);
  std::vector<Stage> todo;
  if (selector == "all") {
    todo = plan;
  } else {
    int n = 0;
    try {
      n = std::stoi(selector);
    } catch (const std::exception&) {
      throw ConfigError("--stage must be 1, 2, 3 or all");
    }
    auto it = std::find_if(plan.begin(), plan.end(), [&](Stage s) { return stage_number(s) == n; });
    if (it == plan.end()) {
      throw ConfigError("stage " + selector + " is not part of strategy " + to_string(strategy));
    }
    todo.push_back(*it);
  }

  const auto first = std::find(plan.begin(), plan.end(), todo.front());
  std::optional<Checkpoint> resume;
  if (first != plan.begin()) {
    const auto prev = *(first - 1);
    const auto path = stage_checkpoint_path(out, prev);
    if (!fs::exists(path)) {
      throw ConfigError("stage " + std::to_string(stage_number(todo.front())) + " needs the stage " +
                        std::to_string(stage_number(prev)) + " checkpoint " + path.string() +
                        "; stages run in order");
    }
    resume = load_checkpoint(path);
    if (resume->config.at("meta").value("strategy", "") != to_string(strategy)) {
      throw ConfigError("checkpoint " + path.string() + " was produced by a different strategy");
    }
  }

  auto model = resume ? tokenizer_from_checkpoint(*resume) : TokenizerModel(cfg.tokenizer);
  TokenizerTrainer trainer(model, cfg.tokenizer_train, strategy);
  if (resume) {
    restore_state(*trainer.discriminator(), "discriminator.", *resume);
    if (!resume->rng_state.empty()) trainer.rng().set_state(resume->rng_state);
    trainer.resume_after(*(first - 1));
  }

  auto train = make_dataset(cfg.train_data);
  auto val = make_dataset(cfg.val_data);
  JsonLines metrics_log(out / "tokenizer_metrics.jsonl");
  TokenizerRun run;
  for (auto stage : todo) {
    log::info(std::string("tokenizer stage ") + to_string(stage) + " (" + to_string(strategy) + ")");
    auto history = trainer.run_stage(*train, *val, stage, [&](const EpochMetrics& m) {
      auto j = to_json(m);
      j["strategy"] = to_string(strategy);
      metrics_log.write(j);
      std::ostringstream msg;
      msg << to_string(m.stage) << " epoch " << m.epoch << ": val mse continuous " << m.val_mse_continuous
          << ", discrete " << m.val_mse_discrete << ", codebook " << m.utilization;
      log::info(msg.str());
    });
    run.metrics[stage] = history;
    const auto path = stage_checkpoint_path(out, stage);
    save_checkpoint(trainer_checkpoint(trainer, stage, cfg), path);
    run.checkpoints.push_back(path);
  }
  if (!trainer.next_stage()) {
    fs::copy_file(run.checkpoints.back(), out / "tokenizer.ckpt", fs::copy_options::overwrite_existing);
  }
  return run;
}

// ---- generator ----------------------------------------------------------

void check_steps(int64_t steps, const MaskTransformer& generator) {
  const auto n = generator->config().max_grid_h * generator->config().max_grid_w;
  if (steps < 1 || steps > n) {
    throw ConfigError("unmasking steps must be in [1, " + std::to_string(n) + "] for this generator, got " +
                      std::to_string(steps));
  }
}

std::pair<MaskTransformer, DiffusionHead> load_generator(const std::string& path) {
  auto ckpt = load_checkpoint(path);
  return generator_from_checkpoint(ckpt);
}

ConditionEmbedding class_conditions(MaskTransformer& generator, const std::vector<int64_t>& labels) {
  if (generator->config().num_classes == 0) return generator->null_condition(static_cast<int64_t>(labels.size()));
  return generator->embed_classes(labels);
}

torch::Tensor real_images(const DatasetSpec& spec, int64_t resolution, int64_t count) {
  auto s = spec;
  s.resolution = resolution;
  auto ds = make_dataset(s);
  return load_range(*ds, 0, std::min<int64_t>(count, ds->size())).images.data();
}

struct SampleOutput {
  torch::Tensor images;
  std::vector<int64_t> labels;
  std::vector<uint64_t> seeds;
};

SampleOutput sample_images(MaskTransformer& generator, DiffusionHead& head, TokenizerModel& tokenizer,
                           const SamplerConfig& sc, int64_t count, const std::vector<int64_t>& classes,
                           int64_t batch) {
  const auto gh = generator->config().max_grid_h, gw = generator->config().max_grid_w;
  const auto n_classes = std::max<int64_t>(1, generator->config().num_classes);
  SampleOutput out;
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < count; start += batch) {
    const auto len = std::min(batch, count - start);
    std::vector<int64_t> labels;
    std::vector<uint64_t> seeds;
    for (int64_t i = start; i < start + len; ++i) {
      labels.push_back(classes.empty() ? i % n_classes : classes[static_cast<size_t>(i) % classes.size()]);
      seeds.push_back(mix_seed(sc.seed, static_cast<uint64_t>(i)));
    }
    auto cond = class_conditions(generator, labels);
    auto result = generate(cond, generator, head, tokenizer, sc, gh, gw, seeds);
    parts.push_back(result.images.data());
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
    out.seeds.insert(out.seeds.end(), seeds.begin(), seeds.end());
  }
  out.images = torch::cat(parts);
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args_in) {
  CLI::App app{"dcar: hybrid tokenizer and masked autoregressive generator"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "experiment config (JSON)");
  app.add_option("--seed", g.seed, "global seed; derives every component seed");
  app.add_option("--set", g.overrides, "override a config key: section.key=value");
  app.add_option("--log-level", g.log_level, "debug|info|warn|error|off");

  // train-tokenizer
  auto* tt = app.add_subcommand("train-tokenizer", "three-stage tokenizer training");
  std::string tt_stage = "all", tt_strategy = "three-stage", tt_out;
  tt->add_option("--stage", tt_stage, "1|2|3|all");
  tt->add_option("--strategy", tt_strategy, "three-stage|no-warmup|joint-alternate");
  tt->add_option("--out", tt_out, "output directory (default: config output_dir)");

  // train-generator
  auto* tg = app.add_subcommand("train-generator", "masked transformer + diffusion head training");
  std::string tg_tokenizer, tg_init = "scratch", tg_lowres, tg_out, tg_name;
  std::optional<int64_t> tg_resolution, tg_steps;
  tg->add_option("--tokenizer", tg_tokenizer, "tokenizer checkpoint")->required();
  tg->add_option("--init", tg_init, "scratch|from_lowres");
  tg->add_option("--lowres", tg_lowres, "low-resolution generator checkpoint (from_lowres)");
  tg->add_option("--resolution", tg_resolution, "training resolution");
  tg->add_option("--steps", tg_steps, "training steps");
  tg->add_option("--out", tg_out, "output directory");
  tg->add_option("--name", tg_name, "checkpoint file stem");

  // sample
  auto* sp = app.add_subcommand("sample", "generate images");
  std::string sp_tokenizer, sp_generator, sp_out, sp_classes, sp_sweep;
  int64_t sp_num = 8, sp_batch = 16, sp_reference = 512;
  std::optional<int64_t> sp_steps, sp_diff_steps;
  std::optional<double> sp_temperature, sp_cfg;
  bool sp_discrete_only = false, sp_no_head_guidance = false, sp_no_images = false;
  sp->add_option("--tokenizer", sp_tokenizer, "tokenizer checkpoint")->required();
  sp->add_option("--generator", sp_generator, "generator checkpoint")->required();
  sp->add_option("--out", sp_out, "output directory");
  sp->add_option("--classes", sp_classes, "comma-separated class labels, cycled");
  sp->add_option("--num", sp_num, "number of images");
  sp->add_option("--batch", sp_batch, "images per forward batch");
  sp->add_option("--steps", sp_steps, "unmasking steps K");
  sp->add_option("--temperature", sp_temperature, "randomized temperature");
  sp->add_option("--cfg-scale", sp_cfg, "classifier-free guidance scale");
  sp->add_option("--diffusion-steps", sp_diff_steps, "residual denoising steps");
  sp->add_flag("--discrete-only", sp_discrete_only, "zero residuals (discrete-only pipeline)");
  sp->add_flag("--no-head-guidance", sp_no_head_guidance, "disable guidance inside the diffusion head");
  sp->add_option("--sweep", sp_sweep, "comma-separated K values; emits a step/quality table");
  sp->add_option("--reference", sp_reference, "real images for the sweep fid-proxy");
  sp->add_flag("--no-images", sp_no_images, "skip writing image files");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "reconstruction and generation metrics");
  std::string ev_tokenizer, ev_generator, ev_report;
  int64_t ev_images = 256, ev_samples = 256;
  std::optional<int64_t> ev_resolution;
  ev->add_option("--tokenizer", ev_tokenizer, "tokenizer checkpoint")->required();
  ev->add_option("--generator", ev_generator, "generator checkpoint (adds generation rows)");
  ev->add_option("--images", ev_images, "held-out images for reconstruction metrics");
  ev->add_option("--samples", ev_samples, "generated images for fid-proxy");
  ev->add_option("--resolution", ev_resolution, "evaluation resolution");
  ev->add_option("--report", ev_report, "write the report as JSON");

  // profile
  auto* pf = app.add_subcommand("profile", "latency (batch 1) and throughput (batch 16)");
  std::string pf_tokenizer, pf_generator, pf_report;
  std::optional<int64_t> pf_steps;
  int64_t pf_warmup = 2, pf_runs = 5;
  bool pf_stub = false;
  pf->add_option("--tokenizer", pf_tokenizer, "tokenizer checkpoint");
  pf->add_option("--generator", pf_generator, "generator checkpoint");
  pf->add_option("--steps", pf_steps, "unmasking steps K");
  pf->add_option("--warmup", pf_warmup, "discarded warmup runs (>= 2)");
  pf->add_option("--runs", pf_runs, "timed runs (>= 5)");
  pf->add_flag("--stub", pf_stub, "profile a stub pipeline instead of a model");
  pf->add_option("--report", pf_report, "write the report as JSON");

  // ablate
  auto* ab = app.add_subcommand("ablate", "tokenizer training-strategy ablation");
  std::string ab_out, ab_strategies = "three-stage,no-warmup,joint-alternate";
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--strategies", ab_strategies, "comma-separated strategies");

  std::vector<std::string> args(args_in.rbegin(), args_in.rend());
  try {
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    log::set_level(parse_level(g.log_level));
    const auto cfg = resolve_config(g);
    const fs::path default_out = cfg.output_dir;

    if (tt->parsed()) {
      const fs::path out = tt_out.empty() ? default_out : fs::path(tt_out);
      auto run = train_tokenizer(cfg, strategy_from_string(tt_strategy), tt_stage, out);
      for (const auto& p : run.checkpoints) std::cout << "wrote " << p.string() << "\n";
      return kExitOk;
    }

    if (tg->parsed()) {
      const auto init = init_mode_from_string(tg_init);
      const fs::path out = tg_out.empty() ? default_out : fs::path(tg_out);
      auto tokenizer = tokenizer_from_checkpoint(load_checkpoint(tg_tokenizer));
      const auto res = tg_resolution.value_or(init == InitMode::scratch ? cfg.recipe.low_resolution
                                                                        : cfg.recipe.high_resolution);
      const auto f = tokenizer->config().compression_factor;
      if (res % f != 0) throw ConfigError("resolution must be divisible by the compression factor");
      const auto grid = res / f;

      MaskTransformer generator{nullptr};
      DiffusionHead head{nullptr};
      if (init == InitMode::scratch) {
        auto gcfg = cfg.generator;
        gcfg.max_grid_h = grid;
        gcfg.max_grid_w = grid;
        generator = MaskTransformer(gcfg);
        head = DiffusionHead(cfg.head);
      } else {
        if (tg_lowres.empty()) throw ConfigError("--init from_lowres needs --lowres <generator checkpoint>");
        auto [low, low_head] = load_generator(tg_lowres);
        generator = generator_from_lowres(low, grid, grid);
        head = low_head;
      }
      if (generator->config().vocab != tokenizer->config().codebook_size) {
        throw ConfigError("codebook size mismatch: generator vocab " + std::to_string(generator->config().vocab) +
                          ", tokenizer codebook " + std::to_string(tokenizer->config().codebook_size));
      }
      if (head->config().target_dim != tokenizer->config().latent_channels) {
        throw ConfigError("latent channel mismatch between tokenizer and diffusion head");
      }

      auto spec = cfg.train_data;
      spec.resolution = res;
      auto train = make_dataset(spec);
      if (!head->stats()) head->set_stats(compute_residual_stats(*train, tokenizer, 10000, cfg.seed));
      auto cache = build_latent_cache(*train, tokenizer, cfg.generator_train.cache_images);

      auto gtc = cfg.generator_train;
      gtc.steps = tg_steps.value_or(res == cfg.recipe.low_resolution ? cfg.recipe.lowres_steps
                                                                     : cfg.recipe.highres_steps);
      std::shared_ptr<const ConditionProvider> provider;
      if (spec.condition_mode == ConditionMode::embedding_file) {
        provider = std::make_shared<EmbeddingFileProvider>(spec.embedding_file);
      }
      const std::string stem = tg_name.empty() ? "generator_" + std::to_string(res) : tg_name;
      JsonLines loss_log(out / (stem + "_loss.jsonl"));
      GeneratorTrainer trainer(generator, head, gtc, spec.condition_mode, provider);
      const auto every = std::max<int64_t>(1, gtc.steps / 10);
      auto records = trainer.train(cache, [&](const GeneratorStepRecord& r) {
        loss_log.write(to_json(r));
        if (r.step % every == 0) {
          std::ostringstream msg;
          msg << "step " << r.step << "/" << gtc.steps << " ce " << r.ce << " diffusion " << r.diffusion;
          log::info(msg.str());
        }
      });
      json meta = {{"init", to_string(init)},
                   {"resolution", res},
                   {"steps", gtc.steps},
                   {"config_hash", config_hash(json(cfg))},
                   {"seed", cfg.seed},
                   {"final_loss", records.back().total}};
      const auto path = out / (stem + ".ckpt");
      save_checkpoint(generator_checkpoint(generator, head, meta, trainer.rng().state()), path);
      std::cout << "wrote " << path.string() << "\n";
      return kExitOk;
    }

    if (sp->parsed()) {
      auto tokenizer = tokenizer_from_checkpoint(load_checkpoint(sp_tokenizer));
      auto [generator, head] = load_generator(sp_generator);
      check_compatible(generator, head, tokenizer);
      auto sc = cfg.sampler;
      if (sp_steps) sc.steps = *sp_steps;
      if (sp_temperature) sc.temperature = *sp_temperature;
      if (sp_cfg) sc.cfg_scale = *sp_cfg;
      if (sp_diff_steps) sc.diffusion_steps = *sp_diff_steps;
      if (sp_discrete_only) sc.discrete_only = true;
      if (sp_no_head_guidance) sc.head_guidance = false;
      sc.validate();
      const auto classes = parse_int_list(sp_classes);
      const fs::path out = sp_out.empty() ? default_out / "samples" : fs::path(sp_out);
      json effective = json(cfg);
      effective["sampler"] = json(sc);
      const auto hash = config_hash(effective);
      const auto res = generator->config().max_grid_h * tokenizer->config().compression_factor;
      check_steps(sc.steps, generator);

      if (!sp_sweep.empty()) {
        const auto ks = parse_int_list(sp_sweep);
        for (auto k : ks) check_steps(k, generator);
        FeatureNet net;
        auto reference = real_images(cfg.val_data, res, sp_reference);
        json rows = json::array();
        std::cout << std::left << std::setw(8) << "K" << std::right << std::setw(14) << "fid-proxy" << "\n";
        for (auto k : ks) {
          auto s = sc;
          s.steps = k;
          auto samples = sample_images(generator, head, tokenizer, s, sp_num, classes, sp_batch);
          const double fid = fid_proxy(samples.images, reference, net);
          rows.push_back({{"steps", k}, {"fid_proxy", fid}, {"samples", sp_num}});
          std::cout << std::left << std::setw(8) << k << std::right << std::setw(14) << std::fixed
                    << std::setprecision(4) << fid << "\n";
        }
        write_json({{"seed", cfg.seed}, {"config_hash", hash}, {"sweep", rows}}, out / "sweep.json");
        return kExitOk;
      }

      auto samples = sample_images(generator, head, tokenizer, sc, sp_num, classes, sp_batch);
      json images = json::array();
      for (int64_t i = 0; i < samples.images.size(0); ++i) {
        std::ostringstream name;
        name << "sample_" << std::setw(5) << std::setfill('0') << i << ".png";
        if (!sp_no_images) write_image_file(samples.images[i], out / name.str());
        images.push_back({{"file", name.str()},
                          {"condition", {{"class_label", samples.labels[static_cast<size_t>(i)]}}},
                          {"seed", samples.seeds[static_cast<size_t>(i)]}});
      }
      fs::create_directories(out);
      write_json({{"seed", cfg.seed},
                  {"config_hash", hash},
                  {"sampler", json(sc)},
                  {"tokenizer", sp_tokenizer},
                  {"generator", sp_generator},
                  {"images", images}},
                 out / "manifest.json");
      std::cout << "wrote " << images.size() << " images to " << out.string() << "\n";
      return kExitOk;
    }

    if (ev->parsed()) {
      auto tokenizer = tokenizer_from_checkpoint(load_checkpoint(ev_tokenizer));
      auto spec = cfg.val_data;
      if (ev_resolution) spec.resolution = *ev_resolution;
      auto val = make_dataset(spec);
      FeatureNet net;
      std::vector<std::pair<std::string, MetricReport>> rows;
      rows.emplace_back("recon continuous", evaluate_reconstruction(tokenizer, *val, Path::continuous, ev_images, net));
      rows.emplace_back("recon discrete", evaluate_reconstruction(tokenizer, *val, Path::discrete, ev_images, net));
      if (!ev_generator.empty()) {
        auto [generator, head] = load_generator(ev_generator);
        check_compatible(generator, head, tokenizer);
        const auto res = generator->config().max_grid_h * tokenizer->config().compression_factor;
        auto reference = real_images(cfg.val_data, res, ev_samples);
        for (bool discrete : {false, true}) {
          auto sc = cfg.sampler;
          sc.discrete_only = discrete;
          auto samples = sample_images(generator, head, tokenizer, sc, ev_samples, {}, 16);
          MetricReport r;
          r.fid_proxy = fid_proxy(samples.images, reference, net);
          r.fid_samples = ev_samples;
          rows.emplace_back(discrete ? "generate discrete-only" : "generate hybrid", r);
        }
      }
      std::cout << render_table(rows);
      if (!ev_report.empty()) {
        json j = json::object();
        for (const auto& [name, r] : rows) j[name] = to_json(r);
        write_json(j, ev_report);
      }
      return kExitOk;
    }

    if (pf->parsed()) {
      Pipeline pipeline;
      std::optional<TokenizerModel> tokenizer;
      std::optional<MaskTransformer> generator;
      std::optional<DiffusionHead> head;
      auto sc = cfg.sampler;
      if (pf_steps) sc.steps = *pf_steps;
      if (pf_stub) {
        pipeline = [&](int64_t batch) {
          auto x = torch::ones({batch, 64, 64});
          for (int64_t k = 0; k < sc.steps; ++k) x = torch::tanh(x.bmm(x));
        };
      } else {
        if (pf_tokenizer.empty() || pf_generator.empty()) {
          throw ConfigError("profile needs --tokenizer and --generator (or --stub)");
        }
        tokenizer = tokenizer_from_checkpoint(load_checkpoint(pf_tokenizer));
        auto loaded = load_generator(pf_generator);
        generator = loaded.first;
        head = loaded.second;
        check_compatible(*generator, *head, *tokenizer);
        check_steps(sc.steps, *generator);
        pipeline = [&](int64_t batch) {
          std::vector<int64_t> labels(static_cast<size_t>(batch));
          for (int64_t i = 0; i < batch; ++i) labels[static_cast<size_t>(i)] = i;
          const auto n_classes = std::max<int64_t>(1, (*generator)->config().num_classes);
          for (auto& l : labels) l %= n_classes;
          auto cond = class_conditions(*generator, labels);
          generate(cond, *generator, *head, *tokenizer, sc, (*generator)->config().max_grid_h,
                   (*generator)->config().max_grid_w);
        };
      }
      auto report_json = [&](const ProfileReport& r) {
        auto j = to_json(r);
        j["seed"] = cfg.seed;
        j["steps"] = sc.steps;
        j["config_hash"] = config_hash(json(cfg));
        return j;
      };
      ProfileReport report;
      try {
        report = profile(pipeline, pf_warmup, pf_runs);
      } catch (const ProfileFailure& e) {
        std::cout << render_table(e.partial());
        if (!pf_report.empty()) write_json(report_json(e.partial()), pf_report);
        throw;
      }
      std::cout << render_table(report);
      if (!pf_report.empty()) write_json(report_json(report), pf_report);
      return kExitOk;
    }

    if (ab->parsed()) {
      const fs::path out = ab_out.empty() ? default_out / "ablation" : fs::path(ab_out);
      json rows = json::array();
      std::stringstream ss(ab_strategies);
      std::string name;
      std::cout << std::left << std::setw(18) << "strategy" << std::right << std::setw(16) << "stage-2 mse"
                << std::setw(16) << "final mse" << "\n";
      while (std::getline(ss, name, ',')) {
        const auto strategy = strategy_from_string(name);
        const auto dir = out / name;
        fs::remove_all(dir);
        auto run = train_tokenizer(cfg, strategy, "all", dir);
        json row = {{"strategy", name}};
        if (auto it = run.metrics.find(Stage::discrete_learning); it != run.metrics.end() && !it->second.empty()) {
          row["stage2_discrete_mse"] = it->second.back().val_mse_discrete;
        }
        const auto& last = run.metrics.at(stage_plan(strategy).back());
        row["final_discrete_mse"] = last.back().val_mse_discrete;
        row["final_continuous_mse"] = last.back().val_mse_continuous;
        rows.push_back(row);
        std::cout << std::left << std::setw(18) << name << std::right << std::setw(16)
                  << (row.contains("stage2_discrete_mse") ? std::to_string(row["stage2_discrete_mse"].get<double>())
                                                          : std::string("-"))
                  << std::setw(16) << std::to_string(row["final_discrete_mse"].get<double>()) << "\n";
      }
      write_json({{"seed", cfg.seed}, {"config_hash", config_hash(json(cfg))}, {"rows", rows}},
                 out / "ablation.json");
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace dcar::cli
