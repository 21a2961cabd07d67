#include "rflow/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace fs = std::filesystem;

namespace rflow {

namespace {

constexpr uint64_t kStreamSampleInit = 0x20;
constexpr uint64_t kStreamSampleChain = 0x21;
constexpr uint64_t kStreamBench = 0x22;

template <typename Fn>
void parallel_for_cases(size_t n, Fn&& fn) {
    size_t workers = std::min(static_cast<size_t>(worker_count()), n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::mutex err_mu;
    std::exception_ptr first_err;
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_err) first_err = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_err) std::rethrow_exception(first_err);
}

double median_seconds(std::vector<double> samples) {
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
}

template <typename Fn>
double timed_seconds(Fn&& fn) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct LoadedPipeline {
    Vae vae;
    UNet unet;
};

LoadedPipeline load_pipeline(const RunConfig& cfg, const std::string& unet_checkpoint) {
    LoadedPipeline p{Vae(cfg.vae, cfg.seed), UNet(cfg.unet, cfg.seed)};
    load_model_params(cfg.vae_checkpoint_path(), p.vae.params());
    load_model_params(unet_checkpoint, p.unet.params());
    return p;
}

}  // namespace

int worker_count() {
    const char* env = std::getenv("RFLOW_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    check(end && *end == '\0' && v >= 1 && v <= 256, Err::ConfigInvalid,
          "RFLOW_THREADS must be an integer in [1, 256]");
    return static_cast<int>(v);
}

SampleResult run_sample(const RunConfig& cfg, const SampleOptions& opt) {
    cfg.validate();
    std::string sampler = opt.sampler.empty() ? cfg.sampler : opt.sampler;
    check(sampler == "rflow" || sampler == "ddpm", Err::ConfigInvalid,
          "sampler must be 'rflow' or 'ddpm', got '" + sampler + "'");
    check(opt.steps >= 0, Err::ConfigInvalid, "steps must be >= 0");
    int steps = opt.steps > 0 ? opt.steps : (sampler == "rflow" ? cfg.rflow.steps : cfg.ddpm_T);

    Manifest manifest = read_manifest(cfg.manifest);
    auto cases = manifest.in_split(opt.split);
    check(!cases.empty(), Err::DataMissing, "split '" + opt.split + "' has no cases");

    std::string ckpt = opt.checkpoint.empty()
                           ? (fs::path(cfg.out_dir) / (sampler + ".ckpt")).string()
                           : opt.checkpoint;
    LoadedPipeline p = load_pipeline(cfg, ckpt);
    DdpmSchedule sched;
    if (sampler == "ddpm") sched = DdpmSchedule::linear(steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end);

    std::string suffix;
    if (opt.mask_t1w) suffix += "_not1w";
    if (opt.mask_flair) suffix += "_noflair";
    std::string pred_dir = opt.pred_dir.empty()
                               ? (fs::path(cfg.out_dir) / ("preds_" + sampler + suffix)).string()
                               : opt.pred_dir;
    fs::create_directories(pred_dir);

    parallel_for_cases(cases.size(), [&](size_t i) {
        const ManifestCase& mc = *cases[i];
        Volume t1w = read_vvol(resolve_relative(cfg.manifest, mc.t1w));
        Volume flair = read_vvol(resolve_relative(cfg.manifest, mc.flair));

        NoGradGuard no_grad;
        ConditioningLatents cond;
        cond.cond_t1w = p.vae.encode(volume_to_tensor(t1w)).mu;
        cond.cond_flair = p.vae.encode(volume_to_tensor(flair)).mu;
        cond.mask_t1w = opt.mask_t1w;
        cond.mask_flair = opt.mask_flair;

        Rng init_rng = derive_rng(cfg.seed, {kStreamSampleInit, i});
        Tensor z = Tensor::randn(cond.cond_t1w.shape(), init_rng);
        if (sampler == "rflow") {
            VelocityFn vnet = [&](const Tensor& z_t, double t) {
                return p.unet.forward(assemble_input(z_t, cond), t);
            };
            z = rf_sample(vnet, z, steps);
        } else {
            EpsFn eps_net = [&](const Tensor& z_t, int t) {
                return p.unet.forward(assemble_input(z_t, cond), ddpm_time(t, sched.T));
            };
            Rng chain_rng = derive_rng(cfg.seed, {kStreamSampleChain, i});
            z = ddpm_sample(eps_net, z, sched, chain_rng);
        }
        Volume pred = tensor_to_volume(p.vae.decode(z), t1w.spacing);
        pred.intensity_range = t1w.intensity_range;
        write_vvol(pred, (fs::path(pred_dir) / (mc.id + "_pred.vvol")).string());
    });

    return SampleResult{pred_dir, static_cast<int>(cases.size())};
}

MetricReport run_evaluate(const RunConfig& cfg, const EvaluateOptions& opt_in) {
    EvaluateOptions opt = opt_in;
    if (opt.pred_dir.empty())
        opt.pred_dir = (fs::path(cfg.out_dir) / ("preds_" + cfg.sampler)).string();
    Manifest manifest = read_manifest(cfg.manifest);
    auto cases = manifest.in_split(opt.split);
    check(!cases.empty(), Err::DataMissing, "split '" + opt.split + "' has no cases");

    std::vector<std::vector<CaseRecord>> records(cases.size());
    std::vector<std::vector<std::string>> notes(cases.size());
    parallel_for_cases(cases.size(), [&](size_t i) {
        const ManifestCase& mc = *cases[i];
        std::string pred_path = (fs::path(opt.pred_dir) / (mc.id + "_pred.vvol")).string();
        check(fs::exists(pred_path), Err::MissingPrediction,
              "no prediction for case " + mc.id + " at " + pred_path);
        Volume pred = read_vvol(pred_path);
        Volume gt = read_vvol(resolve_relative(cfg.manifest, mc.t1c));
        SegMask mask;
        const SegMask* mask_ptr = nullptr;
        if (opt.with_masks) {
            mask = read_vvol_mask(resolve_relative(cfg.manifest, mc.mask));
            mask_ptr = &mask;
        }
        records[i] = evaluate_case(mc.id, pred, gt, mask_ptr, SsimConfig{}, &notes[i]);
    });

    MetricReport report;
    for (size_t i = 0; i < cases.size(); ++i) {
        report.cases.insert(report.cases.end(), records[i].begin(), records[i].end());
        report.notes.insert(report.notes.end(), notes[i].begin(), notes[i].end());
    }
    if (opt.write_files) {
        std::string csv = opt.out_csv.empty() ? (fs::path(opt.pred_dir) / "metrics.csv").string()
                                              : opt.out_csv;
        std::string js = opt.out_json.empty() ? (fs::path(opt.pred_dir) / "metrics.json").string()
                                              : opt.out_json;
        write_report_csv(report, csv);
        write_report_json(report, js);
    }
    return report;
}

namespace {

std::vector<double> finite_metric(const MetricReport& r, const std::string& region,
                                  const std::string& metric) {
    std::vector<double> out;
    for (const CaseRecord& c : r.cases) {
        if (c.region != region) continue;
        double v = metric == "nmse" ? c.nmse
                 : metric == "psnr_db" ? c.psnr_db
                 : metric == "ncc" ? c.ncc
                 : c.ssim;
        if (std::isfinite(v)) out.push_back(v);
    }
    return out;
}

double vec_mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

std::vector<CompareRow> run_compare(const RunConfig& cfg, const std::string& dir_a,
                                    const std::string& dir_b, const std::string& split,
                                    bool with_masks, const std::string& out_json) {
    EvaluateOptions base;
    base.split = split;
    base.with_masks = with_masks;
    base.write_files = false;
    EvaluateOptions oa = base, ob = base;
    oa.pred_dir = dir_a;
    ob.pred_dir = dir_b;
    MetricReport ra = run_evaluate(cfg, oa);
    MetricReport rb = run_evaluate(cfg, ob);

    std::vector<std::string> regions = {"whole"};
    if (with_masks) regions.push_back("tumor");
    const char* metrics[] = {"nmse", "psnr_db", "ncc", "ssim"};

    std::vector<CompareRow> rows;
    for (const std::string& region : regions)
        for (const char* metric : metrics) {
            CompareRow row;
            row.metric = metric;
            row.region = region;
            std::vector<double> va = finite_metric(ra, region, metric);
            std::vector<double> vb = finite_metric(rb, region, metric);
            row.mean_a = vec_mean(va);
            row.mean_b = vec_mean(vb);
            try {
                row.test = welch_t(va, vb);
            } catch (const Error& e) {
                if (e.code() != Err::ZeroVariance) throw;
                row.test = TTest{0.0, 0.0, 1.0};  // identical spreads: no evidence
            }
            rows.push_back(row);
        }

    if (!out_json.empty()) {
        nlohmann::json j;
        j["split"] = split;
        j["a"] = dir_a;
        j["b"] = dir_b;
        j["rows"] = nlohmann::json::array();
        for (const CompareRow& r : rows)
            j["rows"].push_back({{"metric", r.metric},
                                 {"region", r.region},
                                 {"mean_a", r.mean_a},
                                 {"mean_b", r.mean_b},
                                 {"t", r.test.t},
                                 {"dof", r.test.dof},
                                 {"p", r.test.p},
                                 {"significant", r.test.p < kSignificance}});
        std::ofstream os(out_json);
        check(os.good(), Err::DataMissing, "cannot open for write: " + out_json);
        os << j.dump(2) << "\n";
    }
    return rows;
}

std::vector<BenchRow> run_bench(const RunConfig& cfg, const BenchOptions& opt) {
    cfg.validate();
    check(opt.repeats >= 1, Err::ConfigInvalid, "repeats must be >= 1");
    Manifest manifest = read_manifest(cfg.manifest);
    auto cases = manifest.in_split("test");
    if (cases.empty()) cases = manifest.in_split("train");
    check(!cases.empty(), Err::DataMissing, "manifest has no cases to benchmark on");
    const ManifestCase& mc = *cases.front();

    Vae vae(cfg.vae, cfg.seed);
    if (fs::exists(cfg.vae_checkpoint_path())) load_model_params(cfg.vae_checkpoint_path(), vae.params());
    UNet unet(cfg.unet, cfg.seed);
    if (!opt.checkpoint.empty()) load_model_params(opt.checkpoint, unet.params());

    Volume t1w = read_vvol(resolve_relative(cfg.manifest, mc.t1w));
    Volume flair = read_vvol(resolve_relative(cfg.manifest, mc.flair));
    Tensor t1w_in = volume_to_tensor(t1w);
    Tensor flair_in = volume_to_tensor(flair);

    NoGradGuard no_grad;
    std::vector<BenchRow> rows;
    uint64_t combo = 0;

    auto bench_combo = [&](const std::string& sampler, int steps) {
        ConditioningLatents cond;
        std::vector<double> enc_times, den_times, dec_times;
        Tensor z_final;
        int nfe = 0;
        DdpmSchedule sched;
        if (sampler == "ddpm") sched = DdpmSchedule::linear(steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end);

        for (int r = 0; r < opt.repeats; ++r) {
            enc_times.push_back(timed_seconds([&] {
                cond.cond_t1w = vae.encode(t1w_in).mu;
                cond.cond_flair = vae.encode(flair_in).mu;
            }));

            Rng init_rng = derive_rng(cfg.seed, {kStreamBench, combo, static_cast<uint64_t>(r)});
            Tensor z = Tensor::randn(cond.cond_t1w.shape(), init_rng);
            nfe = 0;
            den_times.push_back(timed_seconds([&] {
                if (sampler == "rflow") {
                    VelocityFn vnet = [&](const Tensor& z_t, double t) {
                        ++nfe;
                        return unet.forward(assemble_input(z_t, cond), t);
                    };
                    z_final = rf_sample(vnet, z, steps);
                } else {
                    EpsFn eps_net = [&](const Tensor& z_t, int t) {
                        ++nfe;
                        return unet.forward(assemble_input(z_t, cond), ddpm_time(t, sched.T));
                    };
                    Rng chain_rng = derive_rng(cfg.seed, {kStreamBench, combo, 0x100 + static_cast<uint64_t>(r)});
                    z_final = ddpm_sample(eps_net, z, sched, chain_rng);
                }
            }));
            check(nfe == steps, Err::Internal,
                  "NFE mismatch: " + std::to_string(nfe) + " evaluations for " +
                      std::to_string(steps) + " steps");

            dec_times.push_back(timed_seconds([&] { (void)vae.decode(z_final); }));
        }

        rows.push_back({"encode", sampler, steps, median_seconds(enc_times), 2});
        rows.push_back({"denoise", sampler, steps, median_seconds(den_times), steps});
        rows.push_back({"decode", sampler, steps, median_seconds(dec_times), 1});
        ++combo;
    };

    for (int k : opt.rflow_steps) {
        check(k >= 1, Err::ConfigInvalid, "rflow steps must be >= 1");
        bench_combo("rflow", k);
    }
    for (int t : opt.ddpm_steps) {
        check(t >= 1, Err::ConfigInvalid, "ddpm steps must be >= 1");
        bench_combo("ddpm", t);
    }

    if (!opt.out_csv.empty()) write_bench_csv(rows, opt.out_csv);
    return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    std::ofstream os(path);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << "stage,sampler,steps,wall_seconds,nfe\n";
    for (const BenchRow& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.6f,%d\n", r.stage.c_str(), r.sampler.c_str(),
                      r.steps, r.wall_seconds, r.nfe);
        os << buf;
    }
    check(os.good(), Err::Internal, "write failed: " + path);
}

}  // namespace rflow
