#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nctta/dataset.hpp"
#include "nctta/matrix.hpp"
#include "nctta/metrics.hpp"
#include "nctta/model.hpp"

namespace nctta {

enum class Method : uint8_t { NoAdapt, BnAdapt, Tent, Nctta };
enum class LossVariant : uint8_t { InfoNce, L2, Triplet };
enum class UpdatePolicy : uint8_t { AffineOnly, ExtractorAll };

const char* method_name(Method m);
Method method_from_name(const std::string& s);
const char* loss_variant_name(LossVariant v);
LossVariant loss_variant_from_name(const std::string& s);
const char* update_policy_name(UpdatePolicy p);
UpdatePolicy update_policy_from_name(const std::string& s);

// Sentinel meaning "resolve to 0.4 * ln K at run start".
inline constexpr double kAutoThreshold = std::numeric_limits<double>::quiet_NaN();

struct AdaptConfig {
    double alpha{0.5};   // blend between geometric term and confidence, [0, 1]
    double epsilon{1.0}; // FCA distance scale in the geometric term, > 0
    int k{2};            // target-set size, [1, K]
    double gamma_ent{kAutoThreshold}; // entropy filter threshold, > 0 (inf = pass-all)
    double tau_ent{kAutoThreshold};   // weight pivot
    double nu{1.0};                   // P-FCA weight term scale, >= 0
    double eta{1.0};                  // P-FCA weight term slope, >= 0
    double tau_margin{1.0};           // triplet margin, >= 0
    LossVariant variant{LossVariant::InfoNce};
    UpdatePolicy policy{UpdatePolicy::AffineOnly};
    double lr{1e-3};
    int batch_size{64};
    Method method{Method::Nctta};
    // Component toggles for ablations. The tent preset corresponds to
    // ent_weight=1, nc_weight=0, use_filter=false, use_lambda=false.
    double ent_weight{1.0};
    double nc_weight{1.0};
    bool use_filter{true};
    bool use_lambda{true};

    // Fills auto thresholds with 0.4*ln K and validates every range.
    AdaptConfig resolved(int num_classes) const;
};

// Shannon entropy with 0*log 0 := 0.
double entropy(const std::vector<double>& p);

// mask[i] = entropies[i] < gamma_ent (strict).
std::vector<bool> entropy_filter(const std::vector<double>& entropies, double gamma_ent);

struct HybridTarget {
    std::vector<double> y_tilde; // per-class score, not normalized
    std::vector<int> order;      // classes sorted by descending y_tilde, ties lowest-first
    std::vector<int> target_set; // first k of order
};

// y_tilde_j = (1-alpha) * exp(-d_j / epsilon) + alpha * p_j, ranked descending.
HybridTarget hybrid_target(const FcaVector& d, const std::vector<double>& p, double alpha,
                           double epsilon, int k);

// lambda = exp(-(l_ent - tau_ent)) + nu / (1 + eta * pfca). Used as a
// constant weight; no gradient flows through it.
double sample_weight(double l_ent, double pfca, double tau_ent, double nu, double eta);

// Alignment loss on one sample's distance/cosine profile, value only.
// InfoNCE consumes cosines; L2/Triplet consume distances. Positives = target
// set T; L2 and Triplet require a nonempty complement.
double loss_nc_value(const std::vector<double>& distances, const std::vector<double>& cosines,
                     const std::vector<int>& target_set, LossVariant variant, double tau_margin);

// Detached per-sample quantities of one adaptation step: filter outcome,
// hybrid targets, weights. These are constants of the step; no gradient
// flows through them.
struct BatchPlan {
    std::vector<bool> pass;                // entropy filter outcome
    std::vector<bool> degenerate;          // zero-feature rows skipped and logged
    std::vector<int> y_hat;                // pre-update argmax predictions
    std::vector<double> entropies;         // per sample
    std::vector<double> lambdas;           // per sample (1 when use_lambda is off)
    std::vector<double> pfca;              // per sample (NaN for degenerate rows)
    std::vector<std::vector<int>> targets; // hybrid target set per sample
    std::vector<double> nc_values;         // per sample L_NC (0 when nc_weight == 0)
    int contributing{0};
};

// Reads the pre-update forward (features, logits, probabilities) and fixes
// every detached quantity of the step.
BatchPlan plan_batch(const Matrix& features, const Matrix& probs, const Matrix& classifier,
                     const AdaptConfig& cfg);

// Builds sum_i (lambda_i * 1[pass_i] / normalizer) * (ent_weight*L_ENT_i +
// nc_weight*L_NC_i) on the tape holding `tm`, with the plan's masks,
// targets and weights entering as constants. Callers pass the batch size
// as normalizer; tests may pin it to compare filtered sub-batches, and may
// reuse one plan across re-evaluations (that is what keeps finite
// differences consistent with the detached-lambda semantics). Returns an
// invalid Var when no sample contributes.
Var build_loss_from_plan(Tape& tape, const TapeModel& tm, const Matrix& classifier,
                         const AdaptConfig& cfg, const BatchPlan& plan, int normalizer);

struct BatchLoss {
    Var loss; // invalid when no sample contributes
    BatchPlan plan;
};

BatchLoss build_total_loss(Tape& tape, const TapeModel& tm, const Matrix& classifier,
                           const AdaptConfig& cfg, int normalizer);

struct StepLog {
    int step{0};
    int batch_size{0};
    double accuracy{0.0}; // from the pre-update forward
    int pass_count{0};    // entropy-filter survivors in the batch
    int skipped_degenerate{0};
    double mean_lambda{0.0}; // over contributing samples
    double mean_ent{0.0};    // over the batch
    double mean_nc{0.0};     // over non-degenerate samples
    double mean_gfca{0.0};   // diagnostics; labels are never used for adaptation
    double mean_pfca{0.0};
    bool update_applied{false};
};

// One online step: forward (predictions logged before any update), loss,
// backward, gradient step on the update-policy parameters. The classifier
// is never touched. Non-finite gradients skip the update and keep streaming.
StepLog adapt_step(ModelParams& params, NormState& norm, const Matrix& x,
                   const std::vector<int>& y_true, const AdaptConfig& cfg, ForwardMode mode,
                   int step_index);

enum class ScenarioKind : uint8_t { Mild, Ctta, Bs1 };

struct ScenarioSpec {
    ScenarioKind kind{ScenarioKind::Mild};
    ShiftKind shift{ShiftKind::GaussianNoise};
    int severity{3};                         // mild / bs1
    std::vector<int> severities{1, 2, 3, 4, 5}; // ctta segments
};

const char* scenario_kind_name(ScenarioKind k);
ScenarioKind scenario_kind_from_name(const std::string& s);

struct SegmentSummary {
    int severity{0};
    int64_t samples{0};
    int64_t correct{0};
    double accuracy{0.0};
};

struct RunLog {
    std::vector<StepLog> steps;
    std::vector<SegmentSummary> segments;
    int64_t total_samples{0};
    int64_t total_correct{0};
    double stream_accuracy{0.0};
    double final_mean_gfca{0.0}; // mean G-FCA of the last step
};

// Streams the severity-0 `source` through the scenario: mild applies one
// shift, ctta concatenates the severity segments with no model reset, bs1
// forces batch size 1 with eval-statistics forwards. Stream order and shift
// draws are fixed by stream_seed.
RunLog run_scenario(ModelParams& params, NormState& norm, const Dataset& source,
                    const ScenarioSpec& spec, const AdaptConfig& cfg, uint64_t stream_seed);

// Shift seed the scenario runner derives for a segment; exposed so offline
// evaluation can reproduce the exact shifted stream of a run.
uint64_t scenario_shift_seed(uint64_t stream_seed, size_t segment = 0);

// StepLog CSV, one row per step; column order documented in the header row.
void write_steplog_csv(const RunLog& log, const std::string& path);

} // namespace nctta
