#include "dcar/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "dcar/errors.hpp"

namespace dcar {
namespace {

using json = nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& known, const char* section) {
  if (!j.is_object()) throw ConfigError(std::string(section) + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(std::string(section) + ": unknown key '" + key + "'");
  }
}

template <typename T>
void get(const json& j, const char* key, T& out, const char* section) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string(section) + "." + key + ": " + e.what());
  }
}

}  // namespace

void to_json(json& j, const TokenizerConfig& c) {
  j = {{"compression_factor", c.compression_factor}, {"latent_channels", c.latent_channels},
       {"base_width", c.base_width},                 {"max_width", c.max_width},
       {"stage_depths", c.stage_depths},             {"codebook_size", c.codebook_size},
       {"image_channels", c.image_channels},         {"seed", c.seed}};
}

void from_json(const json& j, TokenizerConfig& c) {
  const char* s = "tokenizer";
  check_keys(j, {"compression_factor", "latent_channels", "base_width", "max_width", "stage_depths", "codebook_size",
                 "image_channels", "seed"},
             s);
  get(j, "compression_factor", c.compression_factor, s);
  get(j, "latent_channels", c.latent_channels, s);
  get(j, "base_width", c.base_width, s);
  get(j, "max_width", c.max_width, s);
  get(j, "stage_depths", c.stage_depths, s);
  get(j, "codebook_size", c.codebook_size, s);
  get(j, "image_channels", c.image_channels, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const TokenizerTrainConfig& c) {
  j = {{"l2_weight", c.l2_weight},
       {"l1_weight", c.l1_weight},
       {"perceptual_weight", c.perceptual_weight},
       {"gan_weight", c.gan_weight},
       {"vq_beta", c.vq_beta},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"epochs_stage1", c.epochs_stage1},
       {"epochs_stage2", c.epochs_stage2},
       {"epochs_stage3", c.epochs_stage3},
       {"discrete_probability", c.discrete_probability},
       {"reseed_dead_codes", c.reseed_dead_codes},
       {"val_images", c.val_images},
       {"seed", c.seed}};
}

void from_json(const json& j, TokenizerTrainConfig& c) {
  const char* s = "tokenizer_train";
  check_keys(j, {"l2_weight", "l1_weight", "perceptual_weight", "gan_weight", "vq_beta", "beta1", "beta2",
                 "learning_rate", "batch_size", "epochs_stage1", "epochs_stage2", "epochs_stage3",
                 "discrete_probability", "reseed_dead_codes", "val_images", "seed"},
             s);
  get(j, "l2_weight", c.l2_weight, s);
  get(j, "l1_weight", c.l1_weight, s);
  get(j, "perceptual_weight", c.perceptual_weight, s);
  get(j, "gan_weight", c.gan_weight, s);
  get(j, "vq_beta", c.vq_beta, s);
  get(j, "beta1", c.beta1, s);
  get(j, "beta2", c.beta2, s);
  get(j, "learning_rate", c.learning_rate, s);
  get(j, "batch_size", c.batch_size, s);
  get(j, "epochs_stage1", c.epochs_stage1, s);
  get(j, "epochs_stage2", c.epochs_stage2, s);
  get(j, "epochs_stage3", c.epochs_stage3, s);
  get(j, "discrete_probability", c.discrete_probability, s);
  get(j, "reseed_dead_codes", c.reseed_dead_codes, s);
  get(j, "val_images", c.val_images, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const GeneratorConfig& c) {
  j = {{"layers", c.layers},
       {"width", c.width},
       {"heads", c.heads},
       {"mlp_ratio", c.mlp_ratio},
       {"vocab", c.vocab},
       {"condition_dim", c.condition_dim},
       {"num_classes", c.num_classes},
       {"max_grid_h", c.max_grid_h},
       {"max_grid_w", c.max_grid_w},
       {"attention_dropout", c.attention_dropout},
       {"condition_dropout", c.condition_dropout},
       {"seed", c.seed}};
}

void from_json(const json& j, GeneratorConfig& c) {
  const char* s = "generator";
  check_keys(j, {"layers", "width", "heads", "mlp_ratio", "vocab", "condition_dim", "num_classes", "max_grid_h",
                 "max_grid_w", "attention_dropout", "condition_dropout", "seed"},
             s);
  get(j, "layers", c.layers, s);
  get(j, "width", c.width, s);
  get(j, "heads", c.heads, s);
  get(j, "mlp_ratio", c.mlp_ratio, s);
  get(j, "vocab", c.vocab, s);
  get(j, "condition_dim", c.condition_dim, s);
  get(j, "num_classes", c.num_classes, s);
  get(j, "max_grid_h", c.max_grid_h, s);
  get(j, "max_grid_w", c.max_grid_w, s);
  get(j, "attention_dropout", c.attention_dropout, s);
  get(j, "condition_dropout", c.condition_dropout, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const DiffusionHeadConfig& c) {
  j = {{"mlp_layers", c.mlp_layers},
       {"hidden_width", c.hidden_width},
       {"train_timesteps", c.train_timesteps},
       {"sample_steps", c.sample_steps},
       {"target_dim", c.target_dim},
       {"condition_width", c.condition_width},
       {"batch_mul", c.batch_mul},
       {"normalize_residuals", c.normalize_residuals},
       {"clip_denoised", c.clip_denoised},
       {"seed", c.seed}};
}

void from_json(const json& j, DiffusionHeadConfig& c) {
  const char* s = "head";
  check_keys(j, {"mlp_layers", "hidden_width", "train_timesteps", "sample_steps", "target_dim", "condition_width",
                 "batch_mul", "normalize_residuals", "clip_denoised", "seed"},
             s);
  get(j, "mlp_layers", c.mlp_layers, s);
  get(j, "hidden_width", c.hidden_width, s);
  get(j, "train_timesteps", c.train_timesteps, s);
  get(j, "sample_steps", c.sample_steps, s);
  get(j, "target_dim", c.target_dim, s);
  get(j, "condition_width", c.condition_width, s);
  get(j, "batch_mul", c.batch_mul, s);
  get(j, "normalize_residuals", c.normalize_residuals, s);
  get(j, "clip_denoised", c.clip_denoised, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const GeneratorTrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},                 {"beta2", c.beta2},
       {"batch_size", c.batch_size},       {"steps", c.steps},
       {"ce_weight", c.ce_weight},         {"diffusion_weight", c.diffusion_weight},
       {"grad_clip", c.grad_clip},         {"cache_images", c.cache_images},
       {"seed", c.seed}};
}

void from_json(const json& j, GeneratorTrainConfig& c) {
  const char* s = "generator_train";
  check_keys(j, {"learning_rate", "weight_decay", "beta1", "beta2", "batch_size", "steps", "ce_weight",
                 "diffusion_weight", "grad_clip", "cache_images", "seed"},
             s);
  get(j, "learning_rate", c.learning_rate, s);
  get(j, "weight_decay", c.weight_decay, s);
  get(j, "beta1", c.beta1, s);
  get(j, "beta2", c.beta2, s);
  get(j, "batch_size", c.batch_size, s);
  get(j, "steps", c.steps, s);
  get(j, "ce_weight", c.ce_weight, s);
  get(j, "diffusion_weight", c.diffusion_weight, s);
  get(j, "grad_clip", c.grad_clip, s);
  get(j, "cache_images", c.cache_images, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const SamplerConfig& c) {
  j = {{"steps", c.steps},
       {"temperature", c.temperature},
       {"cfg_scale", c.cfg_scale},
       {"cfg_schedule", c.cfg_schedule},
       {"diffusion_steps", c.diffusion_steps},
       {"head_guidance", c.head_guidance},
       {"discrete_only", c.discrete_only},
       {"seed", c.seed}};
}

void from_json(const json& j, SamplerConfig& c) {
  const char* s = "sampler";
  check_keys(j, {"steps", "temperature", "cfg_scale", "cfg_schedule", "diffusion_steps", "head_guidance",
                 "discrete_only", "seed"},
             s);
  get(j, "steps", c.steps, s);
  get(j, "temperature", c.temperature, s);
  get(j, "cfg_scale", c.cfg_scale, s);
  get(j, "cfg_schedule", c.cfg_schedule, s);
  get(j, "diffusion_steps", c.diffusion_steps, s);
  get(j, "head_guidance", c.head_guidance, s);
  get(j, "discrete_only", c.discrete_only, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const DatasetSpec& c) {
  j = {{"source", to_string(c.source)},
       {"root", c.root},
       {"resolution", c.resolution},
       {"split", to_string(c.split)},
       {"condition_mode", to_string(c.condition_mode)},
       {"embedding_file", c.embedding_file},
       {"size", c.size},
       {"seed", c.seed}};
}

void from_json(const json& j, DatasetSpec& c) {
  const char* s = "data";
  check_keys(j, {"source", "root", "resolution", "split", "condition_mode", "embedding_file", "size", "seed"}, s);
  std::string text;
  if (j.contains("source")) {
    get(j, "source", text, s);
    c.source = data_source_from_string(text);
  }
  get(j, "root", c.root, s);
  get(j, "resolution", c.resolution, s);
  if (j.contains("split")) {
    get(j, "split", text, s);
    c.split = split_from_string(text);
  }
  if (j.contains("condition_mode")) {
    get(j, "condition_mode", text, s);
    c.condition_mode = condition_mode_from_string(text);
  }
  get(j, "embedding_file", c.embedding_file, s);
  get(j, "size", c.size, s);
  get(j, "seed", c.seed, s);
}

void to_json(json& j, const RecipeConfig& c) {
  j = {{"two_stage", c.two_stage},
       {"low_resolution", c.low_resolution},
       {"high_resolution", c.high_resolution},
       {"lowres_steps", c.lowres_steps},
       {"highres_steps", c.highres_steps}};
}

void from_json(const json& j, RecipeConfig& c) {
  const char* s = "recipe";
  check_keys(j, {"two_stage", "low_resolution", "high_resolution", "lowres_steps", "highres_steps"}, s);
  get(j, "two_stage", c.two_stage, s);
  get(j, "low_resolution", c.low_resolution, s);
  get(j, "high_resolution", c.high_resolution, s);
  get(j, "lowres_steps", c.lowres_steps, s);
  get(j, "highres_steps", c.highres_steps, s);
}

void to_json(json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},
       {"output_dir", c.output_dir},
       {"tokenizer", c.tokenizer},
       {"tokenizer_train", c.tokenizer_train},
       {"generator", c.generator},
       {"head", c.head},
       {"generator_train", c.generator_train},
       {"sampler", c.sampler},
       {"train_data", c.train_data},
       {"val_data", c.val_data},
       {"recipe", c.recipe}};
}

void from_json(const json& j, ExperimentConfig& c) {
  const char* s = "experiment";
  check_keys(j, {"seed", "output_dir", "tokenizer", "tokenizer_train", "generator", "head", "generator_train",
                 "sampler", "train_data", "val_data", "recipe", "description"},
             s);
  get(j, "seed", c.seed, s);
  get(j, "output_dir", c.output_dir, s);
  if (j.contains("tokenizer")) from_json(j.at("tokenizer"), c.tokenizer);
  if (j.contains("tokenizer_train")) from_json(j.at("tokenizer_train"), c.tokenizer_train);
  if (j.contains("generator")) from_json(j.at("generator"), c.generator);
  if (j.contains("head")) from_json(j.at("head"), c.head);
  if (j.contains("generator_train")) from_json(j.at("generator_train"), c.generator_train);
  if (j.contains("sampler")) from_json(j.at("sampler"), c.sampler);
  if (j.contains("train_data")) from_json(j.at("train_data"), c.train_data);
  if (j.contains("val_data")) from_json(j.at("val_data"), c.val_data);
  if (j.contains("recipe")) from_json(j.at("recipe"), c.recipe);
}

void ExperimentConfig::validate() const {
  tokenizer.validate();
  tokenizer_train.validate();
  generator.validate();
  head.validate();
  generator_train.validate();
  sampler.validate();
  if (generator.vocab != tokenizer.codebook_size) {
    throw ConfigError("generator vocab must equal the tokenizer codebook size");
  }
  if (head.target_dim != tokenizer.latent_channels) {
    throw ConfigError("head target_dim must equal the tokenizer latent channels");
  }
  if (head.condition_width != generator.width) throw ConfigError("head condition_width must equal generator width");
  for (const auto* d : {&train_data, &val_data}) {
    if (d->resolution % tokenizer.compression_factor != 0) {
      throw ConfigError("dataset resolution " + std::to_string(d->resolution) +
                        " is not divisible by the compression factor");
    }
  }
  if (recipe.two_stage && recipe.high_resolution != 2 * recipe.low_resolution) {
    throw ConfigError("two-stage recipe needs high_resolution = 2 x low_resolution");
  }
  if (recipe.low_resolution % tokenizer.compression_factor != 0 ||
      recipe.high_resolution % tokenizer.compression_factor != 0) {
    throw ConfigError("recipe resolutions must be divisible by the compression factor");
  }
}

void ExperimentConfig::apply_seed(uint64_t s) {
  seed = s;
  tokenizer.seed = mix_seed(s, 1);
  tokenizer_train.seed = mix_seed(s, 2);
  generator.seed = mix_seed(s, 3);
  head.seed = mix_seed(s, 4);
  generator_train.seed = mix_seed(s, 5);
  sampler.seed = mix_seed(s, 6);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  ExperimentConfig cfg;
  from_json(j, cfg);
  cfg.validate();
  return cfg;
}

void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << json(cfg).dump(2) << "\n";
}

uint64_t fnv1a64(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const json& j) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

}  // namespace dcar
