#pragma once

#include <map>
#include <string>

#include "rflow/optim.hpp"
#include "rflow/sched.hpp"
#include "rflow/synthdata.hpp"
#include "rflow/unet.hpp"
#include "rflow/vae.hpp"

namespace rflow {

// One JSON file drives every subcommand; flags may override single fields.
struct RunConfig {
    uint64_t seed = 7;
    std::string out_dir = "run";
    std::string manifest;

    VaeConfig vae;
    double beta_kl = 1e-3;
    int vae_steps = 2000;
    int vae_batch = 4;
    AdamWConfig vae_opt{1e-3, 0.9, 0.999, 1e-8, 1e-5};
    int vae_checkpoint_every = 1000;

    UNetConfig unet;  // in/out channels follow vae.latent_channels
    RFlowSchedule rflow;
    int ddpm_T = 1000;
    double ddpm_beta_start = 1e-4;
    double ddpm_beta_end = 0.02;
    std::string sampler = "rflow";  // default for the sample command

    int train_steps = 3000;
    int batch_size = 4;
    AdamWConfig opt{1e-4, 0.9, 0.999, 1e-8, 1e-4};
    int checkpoint_every = 1000;
    bool latent_sample_draw = true;  // fresh posterior draws per epoch (vs mu)

    std::string vae_checkpoint;  // defaults to <out_dir>/vae.ckpt

    void validate() const;
    std::string vae_checkpoint_path() const;

    static RunConfig from_json_file(const std::string& path);
};

// Paths inside a manifest/config are relative to the file that states them.
std::string resolve_relative(const std::string& anchor_file, const std::string& path);

struct TrainResult {
    std::string checkpoint_path;
    std::string loss_csv_path;
    double first_loss = 0.0;
    double final_loss = 0.0;
    int steps = 0;
};

// Parameters plus optimizer moments/step in one checkpoint file.
void save_train_state(const std::string& path, const Parameters& params, const AdamW* opt);
void load_model_params(const std::string& path, Parameters& params);
void load_train_state(const std::string& path, Parameters& params, AdamW& opt);

TrainResult train_vae(const RunConfig& cfg, const std::string& resume = "");
TrainResult train_rflow(const RunConfig& cfg, const std::string& resume = "");
TrainResult train_ddpm(const RunConfig& cfg, const std::string& resume = "");

// Cached posterior for every (case, role); computed once per VAE checkpoint
// and persisted as .lat next to the run.
struct LatentCache {
    std::map<std::string, LatentRecord> records;  // key "<case_id>/<role>"

    const LatentRecord& at(const std::string& case_id, const std::string& role) const;
};

LatentCache build_latent_cache(const RunConfig& cfg, const Vae& vae, const Manifest& manifest,
                               const std::string& dir);

// z0/conditioning view used by both trainers: posterior draw derived from
// (seed, epoch, case) when sampling is on, otherwise mu.
Tensor latent_for_training(const LatentRecord& rec, const RunConfig& cfg, uint64_t epoch,
                           uint64_t case_ordinal, uint64_t role_tag);

}  // namespace rflow
