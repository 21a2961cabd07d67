#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rflow/pipeline.hpp"
#include "rflow/synthdata.hpp"
#include "rflow/train.hpp"

namespace {

using namespace rflow;

struct GenDataArgs {
    uint64_t seed = 7;
    int cases = 250;
    int extent = 16;
    int n_train = -1, n_val = -1, n_test = -1;
    std::string out;
    bool nifti = false;
};

struct TrainArgs {
    std::string config;
    std::string resume;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir;
    std::string manifest;
    int steps = 0;
};

struct SampleArgs {
    std::string config;
    SampleOptions opt;
    uint64_t seed = 0;
    bool seed_set = false;
};

struct EvaluateArgs {
    std::string config;
    EvaluateOptions opt;
    std::vector<std::string> compare;
    std::string compare_json;
};

struct BenchArgs {
    std::string config;
    BenchOptions opt;
};

RunConfig load_config(const TrainArgs& a) {
    RunConfig cfg = RunConfig::from_json_file(a.config);
    if (a.seed_set) cfg.seed = a.seed;
    if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
    if (!a.manifest.empty()) cfg.manifest = a.manifest;
    return cfg;
}

void print_train_result(const char* what, const TrainResult& r) {
    std::printf("%s: %d steps, loss %.6g -> %.6g\n", what, r.steps, r.first_loss, r.final_loss);
    std::printf("checkpoint: %s\nloss log:   %s\n", r.checkpoint_path.c_str(),
                r.loss_csv_path.c_str());
}

int run_gen_data(const GenDataArgs& a) {
    PhantomSpec spec;
    spec.seed = a.seed;
    size_t e = static_cast<size_t>(a.extent);
    spec.extents = {e, e, e};
    check(a.cases >= 3, Err::ConfigInvalid, "--cases must be >= 3");
    long long n_train = a.n_train >= 0 ? a.n_train : (a.cases * 4) / 5;
    long long n_val = a.n_val >= 0 ? a.n_val : (a.cases - n_train) / 2;
    long long n_test = a.n_test >= 0 ? a.n_test : a.cases - n_train - n_val;
    check(n_train >= 1 && n_val >= 1 && n_test >= 1, Err::ConfigInvalid,
          "each split needs at least one case");
    Manifest m = generate_dataset(spec, n_train, n_val, n_test, a.out, a.nifti);
    std::printf("wrote %zu cases (%lld train / %lld val / %lld test) under %s\n", m.cases.size(),
                n_train, n_val, n_test, a.out.c_str());
    return 0;
}

int run_evaluate_cmd(const EvaluateArgs& a) {
    RunConfig cfg = RunConfig::from_json_file(a.config);
    if (!a.compare.empty()) {
        check(a.compare.size() == 2, Err::ConfigInvalid, "--compare takes exactly two directories");
        auto rows = run_compare(cfg, a.compare[0], a.compare[1], a.opt.split, a.opt.with_masks,
                                a.compare_json);
        std::printf("%-8s %-8s %12s %12s %10s %8s %12s\n", "region", "metric", "mean_a", "mean_b",
                    "t", "dof", "p");
        for (const CompareRow& r : rows)
            std::printf("%-8s %-8s %12.6g %12.6g %10.4g %8.3g %12.6g%s\n", r.region.c_str(),
                        r.metric.c_str(), r.mean_a, r.mean_b, r.test.t, r.test.dof, r.test.p,
                        r.test.p < kSignificance ? "  *" : "");
        return 0;
    }
    MetricReport report = run_evaluate(cfg, a.opt);
    for (const std::string& region : {std::string("whole"), std::string("tumor")}) {
        for (const char* metric : {"nmse", "psnr_db", "ncc", "ssim"}) {
            std::vector<double> vals;
            for (const CaseRecord& c : report.cases) {
                if (c.region != region) continue;
                double v = std::string(metric) == "nmse"      ? c.nmse
                           : std::string(metric) == "psnr_db" ? c.psnr_db
                           : std::string(metric) == "ncc"     ? c.ncc
                                                              : c.ssim;
                vals.push_back(v);
            }
            if (vals.empty()) continue;
            std::vector<double> finite;
            for (double v : vals)
                if (std::isfinite(v)) finite.push_back(v);
            CohortStat st = aggregate(finite);
            std::printf("%-8s %-8s %.6g +/- %.6g (n=%zu)\n", region.c_str(), metric, st.mean,
                        st.stddev, st.n);
        }
    }
    for (const std::string& note : report.notes) std::printf("note: %s\n", note.c_str());
    return 0;
}

int run_bench_cmd(const BenchArgs& a) {
    RunConfig cfg = RunConfig::from_json_file(a.config);
    auto rows = run_bench(cfg, a.opt);
    std::printf("%-8s %-6s %6s %14s %6s\n", "stage", "sampler", "steps", "wall_seconds", "nfe");
    for (const BenchRow& r : rows)
        std::printf("%-8s %-6s %6d %14.6f %6d\n", r.stage.c_str(), r.sampler.c_str(), r.steps,
                    r.wall_seconds, r.nfe);
    for (const BenchRow& r : rows)
        if (r.stage == "denoise" && r.sampler == "ddpm")
            std::printf(
                "cost model: image-space patch DDPM at this budget would be %d NFE x patch count "
                "(e.g. x64 patches) x per-patch cost; not an implemented sampler\n",
                r.steps);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"latent rectified-flow synthesis toolkit"};
    app.require_subcommand(1);

    GenDataArgs gen_args;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
    gen->add_option("--seed", gen_args.seed, "dataset seed")->capture_default_str();
    gen->add_option("--cases", gen_args.cases, "total cases, split 80/10/10")->capture_default_str();
    gen->add_option("--extent", gen_args.extent, "cubic volume extent")->capture_default_str();
    gen->add_option("--train", gen_args.n_train, "explicit train count");
    gen->add_option("--val", gen_args.n_val, "explicit val count");
    gen->add_option("--test", gen_args.n_test, "explicit test count");
    gen->add_option("--out", gen_args.out, "output directory")->required();
    gen->add_flag("--nifti", gen_args.nifti, "also write NIfTI-1 copies");

    TrainArgs vae_args, rflow_args, ddpm_args;
    auto add_train_opts = [](CLI::App* cmd, TrainArgs& a) {
        cmd->add_option("--config", a.config, "run config JSON")->required();
        cmd->add_option("--resume", a.resume, "checkpoint to resume from");
        cmd->add_option("--seed", a.seed, "override config seed")
            ->each([&a](const std::string&) { a.seed_set = true; });
        cmd->add_option("--out-dir", a.out_dir, "override config out_dir");
        cmd->add_option("--manifest", a.manifest, "override config manifest");
        cmd->add_option("--steps", a.steps, "override step budget");
    };
    add_train_opts(app.add_subcommand("train-vae", "train the volume autoencoder"), vae_args);
    add_train_opts(app.add_subcommand("train-rflow", "train the rectified-flow velocity network"),
                   rflow_args);
    add_train_opts(app.add_subcommand("train-ddpm", "train the DDPM baseline"), ddpm_args);

    SampleArgs sample_args;
    auto* sample = app.add_subcommand("sample", "synthesize volumes for a split");
    sample->add_option("--config", sample_args.config, "run config JSON")->required();
    sample->add_option("--checkpoint", sample_args.opt.checkpoint, "network checkpoint");
    sample->add_option("--split", sample_args.opt.split, "split to sample")->capture_default_str();
    sample->add_option("--sampler", sample_args.opt.sampler, "rflow | ddpm");
    sample->add_option("--steps", sample_args.opt.steps, "integration steps (0 = config)");
    sample->add_option("--out", sample_args.opt.pred_dir, "prediction directory");
    sample->add_flag("--mask-t1w", sample_args.opt.mask_t1w, "zero the t1w conditioning stream");
    sample->add_flag("--mask-flair", sample_args.opt.mask_flair, "zero the flair conditioning stream");
    sample->add_option("--seed", sample_args.seed, "override config seed")
        ->each([&sample_args](const std::string&) { sample_args.seed_set = true; });

    EvaluateArgs eval_args;
    bool no_masks = false;
    auto* eval = app.add_subcommand("evaluate", "score predictions against ground truth");
    eval->add_option("--config", eval_args.config, "run config JSON")->required();
    eval->add_option("--pred-dir", eval_args.opt.pred_dir, "prediction directory");
    eval->add_option("--split", eval_args.opt.split, "split to score")->capture_default_str();
    eval->add_flag("--no-masks", no_masks, "skip tumor-region metrics");
    eval->add_option("--out-csv", eval_args.opt.out_csv, "metrics CSV path");
    eval->add_option("--out-json", eval_args.opt.out_json, "metrics JSON path");
    eval->add_option("--compare", eval_args.compare, "two prediction dirs for Welch t-tests")
        ->expected(2);
    eval->add_option("--compare-json", eval_args.compare_json, "comparison JSON path");

    BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "time encode/denoise/decode per sampler");
    bench->add_option("--config", bench_args.config, "run config JSON")->required();
    bench->add_option("--checkpoint", bench_args.opt.checkpoint, "network checkpoint (optional)");
    bench->add_option("--rflow-steps", bench_args.opt.rflow_steps, "rflow step counts")
        ->capture_default_str();
    bench->add_option("--ddpm-steps", bench_args.opt.ddpm_steps, "ddpm step counts")
        ->capture_default_str();
    bench->add_option("--repeats", bench_args.opt.repeats, "timing repeats (median)")
        ->capture_default_str();
    bench->add_option("--out-csv", bench_args.opt.out_csv, "bench CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(gen_args);
        if (app.get_subcommand("train-vae")->parsed()) {
            RunConfig cfg = load_config(vae_args);
            if (vae_args.steps > 0) cfg.vae_steps = vae_args.steps;
            print_train_result("train-vae", train_vae(cfg, vae_args.resume));
            return 0;
        }
        if (app.get_subcommand("train-rflow")->parsed()) {
            RunConfig cfg = load_config(rflow_args);
            if (rflow_args.steps > 0) cfg.train_steps = rflow_args.steps;
            print_train_result("train-rflow", train_rflow(cfg, rflow_args.resume));
            return 0;
        }
        if (app.get_subcommand("train-ddpm")->parsed()) {
            RunConfig cfg = load_config(ddpm_args);
            if (ddpm_args.steps > 0) cfg.train_steps = ddpm_args.steps;
            print_train_result("train-ddpm", train_ddpm(cfg, ddpm_args.resume));
            return 0;
        }
        if (sample->parsed()) {
            RunConfig cfg = RunConfig::from_json_file(sample_args.config);
            if (sample_args.seed_set) cfg.seed = sample_args.seed;
            SampleResult r = run_sample(cfg, sample_args.opt);
            std::printf("wrote %d predictions under %s\n", r.cases, r.pred_dir.c_str());
            return 0;
        }
        if (eval->parsed()) {
            eval_args.opt.with_masks = !no_masks;
            return run_evaluate_cmd(eval_args);
        }
        if (bench->parsed()) return run_bench_cmd(bench_args);
        fail(Err::Internal, "no subcommand dispatched");
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return err_is_user_input(e.code()) ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "Internal: " << e.what() << "\n";
        return 1;
    }
}
