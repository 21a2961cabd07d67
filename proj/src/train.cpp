#include "rflow/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rflow/checkpoint.hpp"

namespace fs = std::filesystem;

namespace rflow {

namespace {

using nlohmann::json;

// Stream tags keep every stochastic draw on its own counter-derived path.
constexpr uint64_t kStreamEpochPerm = 0x10;
constexpr uint64_t kStreamVaeEps = 0x11;
constexpr uint64_t kStreamVaeValEps = 0x12;
constexpr uint64_t kStreamDiffStep = 0x13;
constexpr uint64_t kStreamDiffVal = 0x14;
constexpr uint64_t kStreamLatentDraw = 0x15;

void require_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed)
            if (item.key() == k) {
                known = true;
                break;
            }
        check(known, Err::ConfigInvalid, path + ": unknown key '" + item.key() + "'");
    }
}

double jnum(const json& j, const char* key, double dflt, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) return dflt;
    check(it->is_number(), Err::ConfigInvalid, path + "." + key + " must be a number");
    return it->get<double>();
}

int jint(const json& j, const char* key, int dflt, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) return dflt;
    check(it->is_number_integer(), Err::ConfigInvalid, path + "." + key + " must be an integer");
    return it->get<int>();
}

uint64_t juint(const json& j, const char* key, uint64_t dflt, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) return dflt;
    check(it->is_number_integer() && it->get<int64_t>() >= 0, Err::ConfigInvalid,
          path + "." + key + " must be a non-negative integer");
    return it->get<uint64_t>();
}

std::string jstr(const json& j, const char* key, const std::string& dflt, const std::string& path) {
    auto it = j.find(key);
    if (it == j.end()) return dflt;
    check(it->is_string(), Err::ConfigInvalid, path + "." + key + " must be a string");
    return it->get<std::string>();
}

void parse_adamw(const json& j, const std::string& path, AdamWConfig& out) {
    out.lr = jnum(j, "lr", out.lr, path);
    out.beta1 = jnum(j, "beta1", out.beta1, path);
    out.beta2 = jnum(j, "beta2", out.beta2, path);
    out.eps = jnum(j, "eps", out.eps, path);
    out.weight_decay = jnum(j, "weight_decay", out.weight_decay, path);
}

std::vector<size_t> epoch_perm(size_t n, uint64_t seed, uint64_t epoch) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng = derive_rng(seed, {kStreamEpochPerm, epoch});
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

struct LossLog {
    std::ofstream out;
    explicit LossLog(const std::string& path, bool resume) {
        out.open(path, resume ? std::ios::app : std::ios::trunc);
        check(out.good(), Err::DataMissing, "cannot open loss log " + path);
        if (!resume) out << "step,epoch,loss,wall_ms\n";
    }
    void row(int64_t step, uint64_t epoch, double loss, double wall_ms) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%lld,%llu,%.17g,%.3f\n", static_cast<long long>(step),
                      static_cast<unsigned long long>(epoch), loss, wall_ms);
        out << buf;
    }
};

struct ValLog {
    std::ofstream out;
    ValLog(const std::string& path, bool resume) {
        out.open(path, resume ? std::ios::app : std::ios::trunc);
        check(out.good(), Err::DataMissing, "cannot open validation log " + path);
        if (!resume) out << "step,val_loss\n";
    }
    void row(int64_t step, double loss) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", static_cast<long long>(step), loss);
        out << buf;
    }
};

Tensor batch_mean(std::vector<Tensor> losses) {
    Tensor total = losses[0];
    for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return mul_scalar(total, 1.0 / static_cast<double>(losses.size()));
}

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

void apply_params(const std::map<std::string, Tensor>& all, Parameters& params) {
    for (auto& [name, t] : params) {
        auto it = all.find(name);
        check(it != all.end(), Err::CheckpointMismatch, "checkpoint lacks parameter '" + name + "'");
        check(it->second.shape() == t.shape(), Err::CheckpointMismatch,
              "parameter '" + name + "' has shape " + shape_str(it->second.shape()) +
                  ", model expects " + shape_str(t.shape()));
        t.raw_data() = it->second.data();
    }
    for (const auto& [name, t] : all) {
        if (name.rfind("opt.", 0) == 0) continue;
        check(params.contains(name), Err::CheckpointMismatch,
              "checkpoint carries unexpected parameter '" + name + "'");
    }
}

const std::string kRoles[3] = {"t1w", "flair", "t1c"};

const std::string& role_path(const ManifestCase& mc, int role) {
    switch (role) {
        case 0: return mc.t1w;
        case 1: return mc.flair;
        default: return mc.t1c;
    }
}

}  // namespace

std::string resolve_relative(const std::string& anchor_file, const std::string& path) {
    fs::path p(path);
    if (p.is_absolute()) return path;
    return (fs::path(anchor_file).parent_path() / p).string();
}

void RunConfig::validate() const {
    check(!out_dir.empty(), Err::ConfigInvalid, "out_dir must not be empty");
    check(!manifest.empty(), Err::ConfigInvalid, "manifest path must not be empty");
    vae.validate();
    unet.validate();
    rflow.validate();
    vae_opt.validate();
    opt.validate();
    check(vae_steps >= 1 && train_steps >= 1, Err::ConfigInvalid, "step budgets must be >= 1");
    check(vae_batch >= 1 && batch_size >= 1, Err::ConfigInvalid, "batch sizes must be >= 1");
    check(vae_checkpoint_every >= 1 && checkpoint_every >= 1, Err::ConfigInvalid,
          "checkpoint cadence must be >= 1");
    check(beta_kl >= 0.0, Err::ConfigInvalid, "beta_kl must be >= 0");
    check(ddpm_T >= 1, Err::ConfigInvalid, "ddpm T must be >= 1");
    check(ddpm_beta_start > 0.0 && ddpm_beta_end < 1.0 && ddpm_beta_start <= ddpm_beta_end,
          Err::ConfigInvalid, "ddpm betas must satisfy 0 < start <= end < 1");
    check(sampler == "rflow" || sampler == "ddpm", Err::ConfigInvalid,
          "sampler must be 'rflow' or 'ddpm', got '" + sampler + "'");
    check(unet.in_channels == 3 * vae.latent_channels && unet.out_channels == vae.latent_channels,
          Err::ConfigInvalid, "unet channel contract must follow vae latent_channels");
}

std::string RunConfig::vae_checkpoint_path() const {
    return vae_checkpoint.empty() ? (fs::path(out_dir) / "vae.ckpt").string() : vae_checkpoint;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), Err::DataMissing, "cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        fail(Err::ConfigInvalid, "config " + path + " is not valid JSON: " + e.what());
    }
    check(j.is_object(), Err::ConfigInvalid, "config root must be a JSON object");
    require_keys(j, "config", {"seed", "out_dir", "manifest", "vae", "unet", "scheduler", "train"});

    RunConfig cfg;
    cfg.seed = juint(j, "seed", cfg.seed, "config");
    cfg.out_dir = jstr(j, "out_dir", cfg.out_dir, "config");
    cfg.manifest = jstr(j, "manifest", "", "config");
    if (!cfg.manifest.empty()) cfg.manifest = resolve_relative(path, cfg.manifest);

    if (auto it = j.find("vae"); it != j.end()) {
        check(it->is_object(), Err::ConfigInvalid, "config.vae must be an object");
        const json& v = *it;
        require_keys(v, "vae",
                     {"latent_channels", "base_width", "groups", "steps", "batch_size", "beta_kl",
                      "checkpoint_every", "checkpoint", "lr", "beta1", "beta2", "eps",
                      "weight_decay"});
        cfg.vae.latent_channels = jint(v, "latent_channels", cfg.vae.latent_channels, "vae");
        cfg.vae.base_width = jint(v, "base_width", cfg.vae.base_width, "vae");
        cfg.vae.groups = jint(v, "groups", cfg.vae.groups, "vae");
        cfg.vae_steps = jint(v, "steps", cfg.vae_steps, "vae");
        cfg.vae_batch = jint(v, "batch_size", cfg.vae_batch, "vae");
        cfg.beta_kl = jnum(v, "beta_kl", cfg.beta_kl, "vae");
        cfg.vae_checkpoint_every = jint(v, "checkpoint_every", cfg.vae_checkpoint_every, "vae");
        cfg.vae_checkpoint = jstr(v, "checkpoint", "", "vae");
        if (!cfg.vae_checkpoint.empty()) cfg.vae_checkpoint = resolve_relative(path, cfg.vae_checkpoint);
        parse_adamw(v, "vae", cfg.vae_opt);
    }

    if (auto it = j.find("unet"); it != j.end()) {
        check(it->is_object(), Err::ConfigInvalid, "config.unet must be an object");
        const json& u = *it;
        require_keys(u, "unet", {"channels", "res_blocks", "time_embed_dim", "groups"});
        if (auto ch = u.find("channels"); ch != u.end()) {
            check(ch->is_array() && !ch->empty(), Err::ConfigInvalid,
                  "unet.channels must be a non-empty array");
            cfg.unet.channels.clear();
            for (const auto& c : *ch) {
                check(c.is_number_integer(), Err::ConfigInvalid, "unet.channels entries must be integers");
                cfg.unet.channels.push_back(c.get<int>());
            }
        }
        cfg.unet.res_blocks = jint(u, "res_blocks", cfg.unet.res_blocks, "unet");
        cfg.unet.time_embed_dim = jint(u, "time_embed_dim", cfg.unet.time_embed_dim, "unet");
        cfg.unet.groups = jint(u, "groups", cfg.unet.groups, "unet");
    }
    cfg.unet.in_channels = 3 * cfg.vae.latent_channels;
    cfg.unet.out_channels = cfg.vae.latent_channels;

    if (auto it = j.find("scheduler"); it != j.end()) {
        check(it->is_object(), Err::ConfigInvalid, "config.scheduler must be an object");
        const json& s = *it;
        require_keys(s, "scheduler",
                     {"type", "steps", "train_timesteps", "timestep_dist", "ddpm_T", "beta_start",
                      "beta_end"});
        cfg.sampler = jstr(s, "type", cfg.sampler, "scheduler");
        cfg.rflow.steps = jint(s, "steps", cfg.rflow.steps, "scheduler");
        cfg.rflow.train_timesteps = jint(s, "train_timesteps", cfg.rflow.train_timesteps, "scheduler");
        if (auto td = s.find("timestep_dist"); td != s.end()) {
            check(td->is_object(), Err::ConfigInvalid, "scheduler.timestep_dist must be an object");
            require_keys(*td, "timestep_dist", {"type", "loc", "scale"});
            std::string kind = jstr(*td, "type", "logit_normal", "timestep_dist");
            if (kind == "logit_normal")
                cfg.rflow.dist.kind = TimestepDist::Kind::LogitNormal;
            else if (kind == "uniform")
                cfg.rflow.dist.kind = TimestepDist::Kind::Uniform;
            else
                fail(Err::ConfigInvalid, "timestep_dist.type must be logit_normal or uniform");
            cfg.rflow.dist.loc = jnum(*td, "loc", cfg.rflow.dist.loc, "timestep_dist");
            cfg.rflow.dist.scale = jnum(*td, "scale", cfg.rflow.dist.scale, "timestep_dist");
        }
        cfg.ddpm_T = jint(s, "ddpm_T", cfg.ddpm_T, "scheduler");
        cfg.ddpm_beta_start = jnum(s, "beta_start", cfg.ddpm_beta_start, "scheduler");
        cfg.ddpm_beta_end = jnum(s, "beta_end", cfg.ddpm_beta_end, "scheduler");
    }

    if (auto it = j.find("train"); it != j.end()) {
        check(it->is_object(), Err::ConfigInvalid, "config.train must be an object");
        const json& t = *it;
        require_keys(t, "train",
                     {"steps", "batch_size", "checkpoint_every", "latent_sampling", "lr", "beta1",
                      "beta2", "eps", "weight_decay"});
        cfg.train_steps = jint(t, "steps", cfg.train_steps, "train");
        cfg.batch_size = jint(t, "batch_size", cfg.batch_size, "train");
        cfg.checkpoint_every = jint(t, "checkpoint_every", cfg.checkpoint_every, "train");
        std::string mode = jstr(t, "latent_sampling", "draw", "train");
        if (mode == "draw")
            cfg.latent_sample_draw = true;
        else if (mode == "mu")
            cfg.latent_sample_draw = false;
        else
            fail(Err::ConfigInvalid, "train.latent_sampling must be 'draw' or 'mu'");
        parse_adamw(t, "train", cfg.opt);
    }

    cfg.validate();
    return cfg;
}

void save_train_state(const std::string& path, const Parameters& params, const AdamW* opt) {
    std::map<std::string, Tensor> all;
    for (const auto& [name, t] : params) all.emplace(name, t);
    if (opt) opt->export_state(all);
    save_checkpoint(path, all);
}

void load_model_params(const std::string& path, Parameters& params) {
    apply_params(load_checkpoint(path), params);
}

void load_train_state(const std::string& path, Parameters& params, AdamW& opt) {
    auto all = load_checkpoint(path);
    apply_params(all, params);
    opt.import_state(all);
}

const LatentRecord& LatentCache::at(const std::string& case_id, const std::string& role) const {
    auto it = records.find(case_id + "/" + role);
    check(it != records.end(), Err::Internal, "latent cache has no entry for " + case_id + "/" + role);
    return it->second;
}

LatentCache build_latent_cache(const RunConfig& cfg, const Vae& vae, const Manifest& manifest,
                               const std::string& dir) {
    fs::create_directories(dir);
    LatentCache cache;
    for (const auto& mc : manifest.cases) {
        if (mc.split == "test") continue;
        for (int role = 0; role < 3; ++role) {
            std::string lat_path = (fs::path(dir) / (mc.id + "_" + kRoles[role] + ".lat")).string();
            LatentRecord rec;
            if (fs::exists(lat_path)) {
                rec = read_lat(lat_path);
                check(rec.case_id == mc.id && rec.role == kRoles[role], Err::CheckpointMismatch,
                      "cached latent " + lat_path + " belongs to " + rec.case_id + "/" + rec.role);
            } else {
                Volume v = read_vvol(resolve_relative(cfg.manifest, role_path(mc, role)));
                NoGradGuard no_grad;
                GaussianPosterior p = vae.encode(volume_to_tensor(v));
                rec = LatentRecord{mc.id, kRoles[role], p.mu, p.log_var};
                write_lat(rec, lat_path);
            }
            cache.records.emplace(mc.id + "/" + kRoles[role], std::move(rec));
        }
    }
    return cache;
}

Tensor latent_for_training(const LatentRecord& rec, const RunConfig& cfg, uint64_t epoch,
                           uint64_t case_ordinal, uint64_t role_tag) {
    if (!cfg.latent_sample_draw) return rec.mu;
    Rng rng = derive_rng(cfg.seed, {kStreamLatentDraw, epoch, case_ordinal, role_tag});
    NoGradGuard no_grad;
    return reparameterize(GaussianPosterior{rec.mu, rec.log_var}, rng);
}

namespace {

struct VaeSample {
    std::string case_id;
    Tensor x;
};

std::vector<VaeSample> load_vae_samples(const RunConfig& cfg, const Manifest& manifest,
                                        const std::string& split) {
    std::vector<VaeSample> out;
    for (const ManifestCase* mc : manifest.in_split(split))
        for (int role = 0; role < 3; ++role) {
            Volume v = read_vvol(resolve_relative(cfg.manifest, role_path(*mc, role)));
            out.push_back({mc->id + "/" + kRoles[role], volume_to_tensor(v)});
        }
    check(!out.empty(), Err::DataMissing, "manifest has no cases in split '" + split + "'");
    return out;
}

}  // namespace

TrainResult train_vae(const RunConfig& cfg, const std::string& resume) {
    cfg.validate();
    Manifest manifest = read_manifest(cfg.manifest);
    std::vector<VaeSample> train_set = load_vae_samples(cfg, manifest, "train");
    std::vector<VaeSample> val_set = load_vae_samples(cfg, manifest, "val");

    size_t batch = static_cast<size_t>(cfg.vae_batch);
    check(train_set.size() >= batch, Err::ConfigInvalid, "vae batch_size exceeds training set");
    size_t steps_per_epoch = train_set.size() / batch;

    Vae vae(cfg.vae, cfg.seed);
    AdamW opt(vae.params(), cfg.vae_opt);
    if (!resume.empty()) load_train_state(resume, vae.params(), opt);
    int64_t start = opt.step_count();
    check(start < cfg.vae_steps, Err::ConfigInvalid, "resume checkpoint already has all steps");

    fs::create_directories(cfg.out_dir);
    std::string ckpt = (fs::path(cfg.out_dir) / "vae.ckpt").string();
    std::string csv = (fs::path(cfg.out_dir) / "vae_loss.csv").string();
    LossLog log(csv, !resume.empty());
    ValLog val_log((fs::path(cfg.out_dir) / "vae_val_loss.csv").string(), !resume.empty());

    TrainResult result;
    for (int64_t s = start; s < cfg.vae_steps; ++s) {
        double t0 = now_ms();
        uint64_t epoch = static_cast<uint64_t>(s) / steps_per_epoch;
        auto perm = epoch_perm(train_set.size(), cfg.seed, epoch);
        size_t base = (static_cast<size_t>(s) % steps_per_epoch) * batch;

        std::vector<Tensor> losses;
        for (size_t i = 0; i < batch; ++i) {
            const VaeSample& sample = train_set[perm[base + i]];
            Rng rng = derive_rng(cfg.seed, {kStreamVaeEps, static_cast<uint64_t>(s), i});
            losses.push_back(elbo_loss(vae, sample.x, cfg.beta_kl, rng));
        }
        Tensor loss = batch_mean(std::move(losses));
        opt.zero_grad();
        loss.backward();
        opt.step();

        double lv = loss.item();
        log.row(opt.step_count(), epoch, lv, now_ms() - t0);
        if (s == start) result.first_loss = lv;
        result.final_loss = lv;

        if (opt.step_count() % cfg.vae_checkpoint_every == 0 || s + 1 == cfg.vae_steps) {
            save_train_state(ckpt, vae.params(), &opt);
            double vtotal = 0.0;
            NoGradGuard no_grad;
            for (size_t i = 0; i < val_set.size(); ++i) {
                Rng rng = derive_rng(cfg.seed,
                                     {kStreamVaeValEps, static_cast<uint64_t>(opt.step_count()), i});
                vtotal += elbo_loss(vae, val_set[i].x, cfg.beta_kl, rng).item();
            }
            val_log.row(opt.step_count(), vtotal / static_cast<double>(val_set.size()));
        }
    }

    result.checkpoint_path = ckpt;
    result.loss_csv_path = csv;
    result.steps = static_cast<int>(cfg.vae_steps - start);
    return result;
}

namespace {

// Shared scaffold for both diffusion trainers; `loss_fn(case, epoch, rng)`
// builds the per-sample loss from cached latents.
template <typename LossFn>
TrainResult train_diffusion(const RunConfig& cfg, const std::string& resume,
                            const std::string& tag, LossFn&& loss_fn) {
    cfg.validate();
    Manifest manifest = read_manifest(cfg.manifest);
    auto train_cases = manifest.in_split("train");
    auto val_cases = manifest.in_split("val");
    check(!train_cases.empty(), Err::DataMissing, "manifest has no training cases");

    size_t batch = static_cast<size_t>(cfg.batch_size);
    check(train_cases.size() >= batch, Err::ConfigInvalid, "batch_size exceeds training set");
    size_t steps_per_epoch = train_cases.size() / batch;

    UNet unet(cfg.unet, cfg.seed);
    AdamW opt(unet.params(), cfg.opt);
    if (!resume.empty()) load_train_state(resume, unet.params(), opt);
    int64_t start = opt.step_count();
    check(start < cfg.train_steps, Err::ConfigInvalid, "resume checkpoint already has all steps");

    fs::create_directories(cfg.out_dir);
    std::string ckpt = (fs::path(cfg.out_dir) / (tag + ".ckpt")).string();
    std::string csv = (fs::path(cfg.out_dir) / (tag + "_loss.csv")).string();
    LossLog log(csv, !resume.empty());
    ValLog val_log((fs::path(cfg.out_dir) / (tag + "_val_loss.csv")).string(), !resume.empty());

    TrainResult result;
    for (int64_t s = start; s < cfg.train_steps; ++s) {
        double t0 = now_ms();
        uint64_t epoch = static_cast<uint64_t>(s) / steps_per_epoch;
        auto perm = epoch_perm(train_cases.size(), cfg.seed, epoch);
        size_t base = (static_cast<size_t>(s) % steps_per_epoch) * batch;

        std::vector<Tensor> losses;
        for (size_t i = 0; i < batch; ++i) {
            size_t ord = perm[base + i];
            Rng rng = derive_rng(cfg.seed, {kStreamDiffStep, static_cast<uint64_t>(s), i});
            losses.push_back(loss_fn(unet, *train_cases[ord], epoch, ord, rng));
        }
        Tensor loss = batch_mean(std::move(losses));
        opt.zero_grad();
        loss.backward();
        opt.step();

        double lv = loss.item();
        log.row(opt.step_count(), epoch, lv, now_ms() - t0);
        if (s == start) result.first_loss = lv;
        result.final_loss = lv;

        if (opt.step_count() % cfg.checkpoint_every == 0 || s + 1 == cfg.train_steps) {
            save_train_state(ckpt, unet.params(), &opt);
            double vtotal = 0.0;
            NoGradGuard no_grad;
            for (size_t i = 0; i < val_cases.size(); ++i) {
                Rng rng = derive_rng(cfg.seed,
                                     {kStreamDiffVal, static_cast<uint64_t>(opt.step_count()), i});
                // Validation pins the posterior mean; only t and noise vary.
                vtotal += loss_fn(unet, *val_cases[i], 0, 0, rng, /*use_mu=*/true).item();
            }
            val_log.row(opt.step_count(), vtotal / static_cast<double>(val_cases.size()));
        }
    }

    result.checkpoint_path = ckpt;
    result.loss_csv_path = csv;
    result.steps = static_cast<int>(cfg.train_steps - start);
    return result;
}

}  // namespace

TrainResult train_rflow(const RunConfig& cfg, const std::string& resume) {
    cfg.validate();
    Manifest manifest = read_manifest(cfg.manifest);
    Vae vae(cfg.vae, cfg.seed);
    load_model_params(cfg.vae_checkpoint_path(), vae.params());
    LatentCache cache =
        build_latent_cache(cfg, vae, manifest, (fs::path(cfg.out_dir) / "latents").string());

    auto loss_fn = [&](const UNet& unet, const ManifestCase& mc, uint64_t epoch, uint64_t ord,
                       Rng& rng, bool use_mu = false) {
        RunConfig draw_cfg = cfg;
        if (use_mu) draw_cfg.latent_sample_draw = false;
        Tensor z0 = latent_for_training(cache.at(mc.id, "t1c"), draw_cfg, epoch, ord, 2);
        ConditioningLatents cond;
        cond.cond_t1w = latent_for_training(cache.at(mc.id, "t1w"), draw_cfg, epoch, ord, 0);
        cond.cond_flair = latent_for_training(cache.at(mc.id, "flair"), draw_cfg, epoch, ord, 1);
        VelocityFn vnet = [&](const Tensor& z_t, double t) {
            return unet.forward(assemble_input(z_t, cond), t);
        };
        return rflow_loss(vnet, z0, cfg.rflow.dist, rng);
    };
    return train_diffusion(cfg, resume, "rflow", loss_fn);
}

TrainResult train_ddpm(const RunConfig& cfg, const std::string& resume) {
    cfg.validate();
    Manifest manifest = read_manifest(cfg.manifest);
    Vae vae(cfg.vae, cfg.seed);
    load_model_params(cfg.vae_checkpoint_path(), vae.params());
    LatentCache cache =
        build_latent_cache(cfg, vae, manifest, (fs::path(cfg.out_dir) / "latents").string());
    DdpmSchedule sched = DdpmSchedule::linear(cfg.ddpm_T, cfg.ddpm_beta_start, cfg.ddpm_beta_end);

    auto loss_fn = [&](const UNet& unet, const ManifestCase& mc, uint64_t epoch, uint64_t ord,
                       Rng& rng, bool use_mu = false) {
        RunConfig draw_cfg = cfg;
        if (use_mu) draw_cfg.latent_sample_draw = false;
        Tensor z0 = latent_for_training(cache.at(mc.id, "t1c"), draw_cfg, epoch, ord, 2);
        ConditioningLatents cond;
        cond.cond_t1w = latent_for_training(cache.at(mc.id, "t1w"), draw_cfg, epoch, ord, 0);
        cond.cond_flair = latent_for_training(cache.at(mc.id, "flair"), draw_cfg, epoch, ord, 1);
        EpsFn eps_net = [&](const Tensor& z_t, int t) {
            return unet.forward(assemble_input(z_t, cond), ddpm_time(t, sched.T));
        };
        return ddpm_loss(eps_net, z0, sched, rng);
    };
    return train_diffusion(cfg, resume, "ddpm", loss_fn);
}

}  // namespace rflow
