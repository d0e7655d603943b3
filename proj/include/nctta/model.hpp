#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nctta/autodiff.hpp"
#include "nctta/dataset.hpp"
#include "nctta/matrix.hpp"

namespace nctta {

enum class Activation : uint8_t { Relu = 0, Tanh = 1, None = 2 };

// One extractor block: linear (no bias), batch-standardize, learnable
// affine, then the activation. Weights are stored in x out so a batch
// flows left-to-right as x * W.
struct LayerParams {
    Matrix weight;             // in x out
    std::vector<double> gamma; // out
    std::vector<double> beta;  // out
    Activation act{Activation::Relu};
};

struct ModelParams {
    std::vector<LayerParams> layers;
    Matrix classifier; // K x L, bias-free; rows are the class weights w_j
    int input_dim{0};
    int feature_dim{0};
    int num_classes{0};
};

struct LayerNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
};

struct NormState {
    std::vector<LayerNormState> layers;
    double momentum{0.1};
    double eps{1e-5};
};

// Train: batch statistics, running stats updated.
// Eval: running statistics, batch-size independent.
// BatchStat: batch statistics without touching running stats (test-time
// normalization as Tent-style methods use it).
enum class ForwardMode : uint8_t { Train, Eval, BatchStat };

struct ForwardResult {
    Matrix features; // B x L
    Matrix logits;   // B x K
    Matrix probs;    // B x K
};

// Which parameter groups become gradient leaves on the tape.
struct ParamSelection {
    bool extractor_weights{false};
    bool affine{false};
    bool classifier{false};
};

// Handles into a tape holding one differentiable forward pass.
struct TapeModel {
    Var features;
    Var logits;
    Var probs;
    std::vector<Var> weights;    // per layer; invalid when not selected
    std::vector<Var> gammas;     // per layer
    std::vector<Var> betas;      // per layer
    Var classifier_t;            // L x K transposed leaf; invalid when frozen
    std::vector<Var> bn_nodes;   // per layer, Train/BatchStat only
};

// Hidden blocks use relu; the final block emits features through
// `final_act`. The default is a linear feature head: batch-standardized
// affine outputs are roughly centered, which leaves the classifier free to
// meet the feature directions (a bias-free softmax head can never change
// its row mean, so uncentered non-negative features would keep a constant
// alignment gap).
ModelParams init_model(int input_dim, const std::vector<int>& hidden, int num_classes,
                       uint64_t seed, Activation final_act = Activation::None);
NormState init_norm_state(const ModelParams& params);

TapeModel build_forward_tape(Tape& tape, const ModelParams& params, const NormState& norm,
                             const Matrix& x, ForwardMode mode, const ParamSelection& select);

// Value-level forward. Train mode updates `norm` running statistics.
ForwardResult forward(const ModelParams& params, NormState& norm, const Matrix& x,
                      ForwardMode mode);

// Mean cross-entropy of logits against labels, max-shifted log-sum-exp form.
Var cross_entropy_mean(Tape& tape, Var logits, const std::vector<int>& labels);

struct TrainConfig {
    int epochs{300};
    double lr{0.1};
    double momentum{0.9};
    int batch_size{200};
    uint64_t seed{1};
    int post_zero_epochs{100}; // epochs to keep training past first zero-error epoch
    // Constant L2 penalties. Extractor weights and the classifier are
    // decayed separately (affine parameters are never decayed); the decay
    // keeps collapse pressure alive after the loss saturates.
    double weight_decay{0.008};
    double classifier_weight_decay{0.02};
};

struct EpochRecord {
    int epoch{0};
    double train_accuracy{0.0};
    double ce_loss{0.0};
    double mean_gfca{0.0};
    double nc1{0.0};
    double nc2{0.0};
    double nc3{0.0};
    double nc4{0.0};
};

using TrainTrace = std::vector<EpochRecord>;

// Mini-batch gradient descent with momentum into the terminal phase:
// training continues for max(cfg.epochs, first zero-error epoch +
// cfg.post_zero_epochs) epochs, recording collapse metrics each epoch.
TrainTrace train_to_tpt(ModelParams& params, NormState& norm, const Dataset& train,
                        const TrainConfig& cfg);

double evaluate_accuracy(const ModelParams& params, const NormState& norm, const Dataset& d);

// Versioned little-endian checkpoint; load(save(m)) is bit-equal.
void save_checkpoint(const ModelParams& params, const NormState& norm, const std::string& path);
std::pair<ModelParams, NormState> load_checkpoint(const std::string& path);

} // namespace nctta
