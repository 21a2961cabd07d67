#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rflow/volume.hpp"

namespace rflow {

struct SsimConfig {
    double L = 2.0;
    double c1 = 0.0004;  // (0.01*L)^2
    double c2 = 0.0036;  // (0.03*L)^2
    int window_radius = 3;
    double window_sigma = 1.5;

    static SsimConfig with_range(double L);
};

struct TTest {
    double t = 0.0;
    double dof = 0.0;
    double p = 1.0;
};

struct CaseRecord {
    std::string case_id;
    std::string region;  // "whole" | "tumor"
    double nmse = 0.0;
    double psnr_db = 0.0;
    double ncc = 0.0;
    double ssim = 0.0;
};

struct CohortStat {
    double mean = 0.0;
    double stddev = 0.0;
    size_t n = 0;
    size_t excluded_inf = 0;  // +inf PSNR cases left out of the mean
};

struct MetricReport {
    std::vector<CaseRecord> cases;           // sorted by (case_id, region)
    std::vector<std::string> notes;          // e.g. NoForeground tumor masks
};

double nmse(const Volume& x, const Volume& ref);
double psnr(const Volume& x, const Volume& ref, double L);
double ncc(const Volume& x, const Volume& ref);
double ssim3d(const Volume& x, const Volume& ref, const SsimConfig& cfg);

// Two-sided Welch's t-test; p via the regularized incomplete beta.
TTest welch_t(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double reg_inc_beta(double a, double b, double x);

// Whole-volume record always; tumor record (crops of the padded bounding
// box) when a mask with foreground is given. A foreground-free mask adds a
// note instead of a tumor record.
std::vector<CaseRecord> evaluate_case(const std::string& case_id, const Volume& pred,
                                      const Volume& gt, const SegMask* mask,
                                      const SsimConfig& cfg,
                                      std::vector<std::string>* notes = nullptr);

CohortStat aggregate(const std::vector<double>& values);

// One row per case-region; columns case_id, region, nmse, psnr_db, ncc, ssim.
void write_report_csv(const MetricReport& report, const std::string& path);
void write_report_json(const MetricReport& report, const std::string& path);

std::string format_metric(double v);

inline constexpr int kTumorPad = 5;
inline constexpr double kSignificance = 0.05;

}  // namespace rflow
