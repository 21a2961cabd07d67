#pragma once

#include "rflow/metrics.hpp"
#include "rflow/train.hpp"

namespace rflow {

struct SampleOptions {
    std::string checkpoint;  // defaults to <out_dir>/<sampler>.ckpt
    std::string pred_dir;    // defaults to <out_dir>/preds_<sampler>
    std::string split = "test";
    std::string sampler;  // empty -> config's scheduler type
    int steps = 0;        // 0 -> config default (K for rflow, T for ddpm)
    bool mask_t1w = false;
    bool mask_flair = false;
};

struct SampleResult {
    std::string pred_dir;
    int cases = 0;
};

// Encode conditioning (posterior mean), integrate the reverse process from a
// case-keyed N(0,I) latent, decode, write <pred_dir>/<case_id>_pred.vvol.
SampleResult run_sample(const RunConfig& cfg, const SampleOptions& opt);

struct EvaluateOptions {
    std::string pred_dir;
    std::string split = "test";
    bool with_masks = true;
    bool write_files = true;
    std::string out_csv;   // defaults to <pred_dir>/metrics.csv
    std::string out_json;  // defaults to <pred_dir>/metrics.json
};

MetricReport run_evaluate(const RunConfig& cfg, const EvaluateOptions& opt);

struct CompareRow {
    std::string metric;
    std::string region;
    double mean_a = 0.0;
    double mean_b = 0.0;
    TTest test;
};

// Welch's t-test per (metric, region) between two prediction sets evaluated
// against the same ground truth.
std::vector<CompareRow> run_compare(const RunConfig& cfg, const std::string& dir_a,
                                    const std::string& dir_b, const std::string& split,
                                    bool with_masks, const std::string& out_json);

struct BenchOptions {
    std::string checkpoint;  // empty -> freshly initialized weights
    std::vector<int> rflow_steps = {200};
    std::vector<int> ddpm_steps = {1000};
    int repeats = 3;
    std::string out_csv;  // optional
};

struct BenchRow {
    std::string stage;  // encode | denoise | decode
    std::string sampler;
    int steps = 0;
    double wall_seconds = 0.0;
    int nfe = 0;
};

// Median wall time per (sampler, steps) over repeats on one held-out case;
// network-evaluation counts are asserted, not trusted.
std::vector<BenchRow> run_bench(const RunConfig& cfg, const BenchOptions& opt);

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path);

// Worker cap from RFLOW_THREADS (>=1); defaults to 1.
int worker_count();

}  // namespace rflow
