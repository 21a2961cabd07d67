#include "rflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace rflow {

namespace {

void check_extents(const Volume& x, const Volume& ref, const char* op) {
    check(x.extents == ref.extents, Err::ShapeMismatch,
          std::string(op) + ": volume extents differ");
}

}  // namespace

SsimConfig SsimConfig::with_range(double L) {
    SsimConfig cfg;
    cfg.L = L;
    cfg.c1 = (0.01 * L) * (0.01 * L);
    cfg.c2 = (0.03 * L) * (0.03 * L);
    return cfg;
}

double nmse(const Volume& x, const Volume& ref) {
    check_extents(x, ref, "nmse");
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double d = x.data[i] - ref.data[i];
        num += d * d;
        den += ref.data[i] * ref.data[i];
    }
    check(den > 0.0, Err::ZeroReference, "nmse: reference volume is all zero");
    return num / den;
}

double psnr(const Volume& x, const Volume& ref, double L) {
    check_extents(x, ref, "psnr");
    check(L > 0.0, Err::ConfigInvalid, "psnr: dynamic range must be positive");
    double mse = 0.0;
    for (size_t i = 0; i < x.data.size(); ++i) {
        double d = x.data[i] - ref.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(L * L / mse);
}

double ncc(const Volume& x, const Volume& ref) {
    check_extents(x, ref, "ncc");
    size_t n = x.data.size();
    double mx = 0.0, mr = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x.data[i];
        mr += ref.data[i];
    }
    mx /= static_cast<double>(n);
    mr /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, srr = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = x.data[i] - mx;
        double dr = ref.data[i] - mr;
        sxy += dx * dr;
        sxx += dx * dx;
        srr += dr * dr;
    }
    check(sxx > 0.0 && srr > 0.0, Err::ZeroVariance, "ncc: constant input volume");
    return sxy / std::sqrt(sxx * srr);
}

double ssim3d(const Volume& x, const Volume& ref, const SsimConfig& cfg) {
    check_extents(x, ref, "ssim3d");
    int r = cfg.window_radius;
    size_t diam = static_cast<size_t>(2 * r + 1);
    for (size_t e : x.extents)
        check(e >= diam, Err::TooSmall,
              "ssim3d: extent " + std::to_string(e) + " smaller than window diameter " +
                  std::to_string(diam));

    // Normalized 3D Gaussian window, separable weights.
    std::vector<double> w1(diam);
    double acc = 0.0;
    for (int i = -r; i <= r; ++i) {
        double g = std::exp(-0.5 * (i * i) / (cfg.window_sigma * cfg.window_sigma));
        w1[static_cast<size_t>(i + r)] = g;
        acc += g;
    }
    for (auto& g : w1) g /= acc;

    const auto [D, H, W] = x.extents;
    double total = 0.0;
    size_t count = 0;
    for (size_t cd = static_cast<size_t>(r); cd + static_cast<size_t>(r) < D; ++cd)
        for (size_t ch = static_cast<size_t>(r); ch + static_cast<size_t>(r) < H; ++ch)
            for (size_t cw = static_cast<size_t>(r); cw + static_cast<size_t>(r) < W; ++cw) {
                double mx = 0.0, mr = 0.0;
                for (int dz = -r; dz <= r; ++dz)
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            double wt = w1[static_cast<size_t>(dz + r)] *
                                        w1[static_cast<size_t>(dy + r)] *
                                        w1[static_cast<size_t>(dx + r)];
                            size_t idx = x.index(cd + static_cast<size_t>(dz),
                                                 ch + static_cast<size_t>(dy),
                                                 cw + static_cast<size_t>(dx));
                            mx += wt * x.data[idx];
                            mr += wt * ref.data[idx];
                        }
                double vx = 0.0, vr = 0.0, cov = 0.0;
                for (int dz = -r; dz <= r; ++dz)
                    for (int dy = -r; dy <= r; ++dy)
                        for (int dx = -r; dx <= r; ++dx) {
                            double wt = w1[static_cast<size_t>(dz + r)] *
                                        w1[static_cast<size_t>(dy + r)] *
                                        w1[static_cast<size_t>(dx + r)];
                            size_t idx = x.index(cd + static_cast<size_t>(dz),
                                                 ch + static_cast<size_t>(dy),
                                                 cw + static_cast<size_t>(dx));
                            double ex = x.data[idx] - mx;
                            double er = ref.data[idx] - mr;
                            vx += wt * ex * ex;
                            vr += wt * er * er;
                            cov += wt * ex * er;
                        }
                double num = (2.0 * mx * mr + cfg.c1) * (2.0 * cov + cfg.c2);
                double den = (mx * mx + mr * mr + cfg.c1) * (vx + vr + cfg.c2);
                total += num / den;
                ++count;
            }
    return total / static_cast<double>(count);
}

// ---- Welch's t ------------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta (Lentz's method).
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 1e-15;
    constexpr double kTiny = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    fail(Err::Internal, "incomplete beta continued fraction did not converge");
}

}  // namespace

double reg_inc_beta(double a, double b, double x) {
    check(a > 0.0 && b > 0.0, Err::ConfigInvalid, "reg_inc_beta: a, b must be positive");
    check(x >= 0.0 && x <= 1.0, Err::ConfigInvalid, "reg_inc_beta: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log1p(-x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

TTest welch_t(const std::vector<double>& a, const std::vector<double>& b) {
    check(a.size() >= 2 && b.size() >= 2, Err::TooFewSamples,
          "welch_t: both samples need at least 2 values");
    auto stats = [](const std::vector<double>& s) {
        double m = 0.0;
        for (double v : s) m += v;
        m /= static_cast<double>(s.size());
        double var = 0.0;
        for (double v : s) var += (v - m) * (v - m);
        var /= static_cast<double>(s.size() - 1);
        return std::pair{m, var};
    };
    auto [ma, va] = stats(a);
    auto [mb, vb] = stats(b);
    double na = static_cast<double>(a.size());
    double nb = static_cast<double>(b.size());
    double qa = va / na, qb = vb / nb;
    double q = qa + qb;
    check(q > 0.0, Err::ZeroVariance, "welch_t: both samples are constant");

    TTest r;
    r.t = (ma - mb) / std::sqrt(q);
    r.dof = q * q / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    double x = r.dof / (r.dof + r.t * r.t);
    r.p = reg_inc_beta(r.dof / 2.0, 0.5, x);
    return r;
}

// ---- case evaluation / reporting -----------------------------------------

std::vector<CaseRecord> evaluate_case(const std::string& case_id, const Volume& pred,
                                      const Volume& gt, const SegMask* mask,
                                      const SsimConfig& cfg, std::vector<std::string>* notes) {
    check(pred.extents == gt.extents, Err::ShapeMismatch,
          "evaluate_case: prediction and ground truth extents differ");
    std::vector<CaseRecord> out;
    CaseRecord whole{case_id, "whole", nmse(pred, gt), psnr(pred, gt, cfg.L), ncc(pred, gt),
                     ssim3d(pred, gt, cfg)};
    out.push_back(whole);

    if (mask != nullptr) {
        check(mask->extents == gt.extents, Err::ShapeMismatch,
              "evaluate_case: mask extents differ");
        bool any = std::any_of(mask->labels.begin(), mask->labels.end(),
                               [](int32_t v) { return v != 0; });
        if (!any) {
            if (notes != nullptr)
                notes->push_back(case_id + ": NoForeground — mask has no labels, tumor region skipped");
            return out;
        }
        BoundingBox box = tumor_bbox(*mask, kTumorPad);
        Volume pc = crop(pred, box);
        Volume gc = crop(gt, box);
        out.push_back({case_id, "tumor", nmse(pc, gc), psnr(pc, gc, cfg.L), ncc(pc, gc),
                       ssim3d(pc, gc, cfg)});
    }
    return out;
}

CohortStat aggregate(const std::vector<double>& values) {
    CohortStat s;
    std::vector<double> finite;
    for (double v : values) {
        if (std::isinf(v))
            ++s.excluded_inf;
        else
            finite.push_back(v);
    }
    s.n = finite.size();
    if (finite.empty()) return s;
    for (double v : finite) s.mean += v;
    s.mean /= static_cast<double>(finite.size());
    if (finite.size() > 1) {
        double acc = 0.0;
        for (double v : finite) acc += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(finite.size() - 1));
    }
    return s;
}

std::string format_metric(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

void write_report_csv(const MetricReport& report, const std::string& path) {
    std::ofstream os(path);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << "case_id,region,nmse,psnr_db,ncc,ssim\n";
    auto sorted = report.cases;
    std::sort(sorted.begin(), sorted.end(), [](const CaseRecord& a, const CaseRecord& b) {
        return std::tie(a.case_id, a.region) < std::tie(b.case_id, b.region);
    });
    for (const auto& r : sorted)
        os << r.case_id << "," << r.region << "," << format_metric(r.nmse) << ","
           << format_metric(r.psnr_db) << "," << format_metric(r.ncc) << ","
           << format_metric(r.ssim) << "\n";
    check(os.good(), Err::Internal, "write failed: " + path);
}

namespace {

nlohmann::json stat_json(const CohortStat& s) {
    return {{"mean", s.mean}, {"std", s.stddev}, {"n", s.n}, {"excluded_inf", s.excluded_inf}};
}

}  // namespace

void write_report_json(const MetricReport& report, const std::string& path) {
    auto sorted = report.cases;
    std::sort(sorted.begin(), sorted.end(), [](const CaseRecord& a, const CaseRecord& b) {
        return std::tie(a.case_id, a.region) < std::tie(b.case_id, b.region);
    });
    nlohmann::json j;
    j["cases"] = nlohmann::json::array();
    for (const auto& r : sorted)
        j["cases"].push_back({{"case_id", r.case_id},
                              {"region", r.region},
                              {"nmse", r.nmse},
                              {"psnr_db", std::isinf(r.psnr_db) ? 1e308 : r.psnr_db},
                              {"ncc", r.ncc},
                              {"ssim", r.ssim}});
    for (const char* region : {"whole", "tumor"}) {
        std::vector<double> vn, vp, vc, vs;
        for (const auto& r : sorted) {
            if (r.region != region) continue;
            vn.push_back(r.nmse);
            vp.push_back(r.psnr_db);
            vc.push_back(r.ncc);
            vs.push_back(r.ssim);
        }
        if (vn.empty()) continue;
        j["aggregates"][region] = {{"nmse", stat_json(aggregate(vn))},
                                   {"psnr_db", stat_json(aggregate(vp))},
                                   {"ncc", stat_json(aggregate(vc))},
                                   {"ssim", stat_json(aggregate(vs))}};
    }
    j["notes"] = report.notes;
    std::ofstream os(path);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os << j.dump(2) << "\n";
    check(os.good(), Err::Internal, "write failed: " + path);
}

}  // namespace rflow
