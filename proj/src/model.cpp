#include "nctta/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "nctta/metrics.hpp"
#include "nctta/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian; big-endian hosts are unsupported");

namespace nctta {

ModelParams init_model(int input_dim, const std::vector<int>& hidden, int num_classes,
                       uint64_t seed, Activation final_act) {
    if (hidden.empty()) throw InvalidArgument("init_model: need at least one extractor layer");
    Rng rng(seed);
    ModelParams p;
    p.input_dim = input_dim;
    p.num_classes = num_classes;
    int in = input_dim;
    for (int width : hidden) {
        LayerParams layer;
        layer.weight = Matrix(in, width);
        const double std_dev = std::sqrt(2.0 / in); // He init for relu blocks
        for (double& w : layer.weight.data) w = std_dev * rng.normal();
        layer.gamma.assign(static_cast<size_t>(width), 1.0);
        layer.beta.assign(static_cast<size_t>(width), 0.0);
        layer.act = Activation::Relu;
        p.layers.push_back(std::move(layer));
        in = width;
    }
    p.layers.back().act = final_act;
    p.feature_dim = in;
    p.classifier = Matrix(num_classes, in);
    const double std_dev = std::sqrt(1.0 / in);
    for (double& w : p.classifier.data) w = std_dev * rng.normal();
    return p;
}

NormState init_norm_state(const ModelParams& params) {
    NormState n;
    for (const auto& layer : params.layers) {
        LayerNormState s;
        s.running_mean.assign(layer.gamma.size(), 0.0);
        s.running_var.assign(layer.gamma.size(), 1.0);
        n.layers.push_back(std::move(s));
    }
    return n;
}

TapeModel build_forward_tape(Tape& tape, const ModelParams& params, const NormState& norm,
                             const Matrix& x, ForwardMode mode, const ParamSelection& select) {
    if (x.cols != params.input_dim)
        throw ShapeError("forward: input dim " + std::to_string(x.cols) + " != model input dim " +
                         std::to_string(params.input_dim));
    if (x.rows < 1) throw InvalidArgument("forward: empty batch");
    if (mode != ForwardMode::Eval && x.rows < 2)
        throw InvalidArgument("forward: batch statistics undefined for batch size 1; "
                              "use eval mode");

    TapeModel tm;
    Var cur = tape.input(x);
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const auto& layer = params.layers[li];
        const auto& ns = norm.layers[li];
        Var w = select.extractor_weights ? tape.param(layer.weight) : tape.input(layer.weight);
        tm.weights.push_back(select.extractor_weights ? w : Var{});
        Var pre = tape.matmul(cur, w);

        Var standardized;
        if (mode == ForwardMode::Eval) {
            // (x - running_mean) * 1/sqrt(running_var + eps) via row broadcasts.
            std::vector<double> inv_std(ns.running_var.size());
            for (size_t j = 0; j < inv_std.size(); ++j)
                inv_std[j] = 1.0 / std::sqrt(ns.running_var[j] + norm.eps);
            Var mean_row = tape.constant(Matrix::row_vector(ns.running_mean));
            Var inv_row = tape.constant(Matrix::row_vector(inv_std));
            standardized = tape.mul(tape.sub(pre, mean_row), inv_row);
            tm.bn_nodes.push_back(Var{});
        } else {
            standardized = tape.batch_standardize(pre, norm.eps);
            tm.bn_nodes.push_back(standardized);
        }

        Var gamma = select.affine ? tape.param(Matrix::row_vector(layer.gamma))
                                  : tape.input(Matrix::row_vector(layer.gamma));
        Var beta = select.affine ? tape.param(Matrix::row_vector(layer.beta))
                                 : tape.input(Matrix::row_vector(layer.beta));
        tm.gammas.push_back(select.affine ? gamma : Var{});
        tm.betas.push_back(select.affine ? beta : Var{});
        Var affine = tape.add(tape.mul(standardized, gamma), beta);

        switch (layer.act) {
        case Activation::Relu: cur = tape.relu(affine); break;
        case Activation::Tanh: cur = tape.tanh(affine); break;
        case Activation::None: cur = affine; break;
        }
    }
    tm.features = cur;

    const Matrix wt = transpose(params.classifier); // L x K so logits = H * w^T
    Var cls = select.classifier ? tape.param(wt) : tape.input(wt);
    tm.classifier_t = select.classifier ? cls : Var{};
    tm.logits = tape.matmul(cur, cls);
    tm.probs = tape.softmax_rows(tm.logits);
    return tm;
}

ForwardResult forward(const ModelParams& params, NormState& norm, const Matrix& x,
                      ForwardMode mode) {
    Tape tape;
    TapeModel tm = build_forward_tape(tape, params, norm, x, mode, ParamSelection{});
    if (mode == ForwardMode::Train) {
        for (size_t li = 0; li < params.layers.size(); ++li) {
            const auto& [mean, var] = tape.batch_stats(tm.bn_nodes[li]);
            auto& ns = norm.layers[li];
            for (size_t j = 0; j < mean.size(); ++j) {
                ns.running_mean[j] = (1.0 - norm.momentum) * ns.running_mean[j] +
                                     norm.momentum * mean[j];
                ns.running_var[j] = (1.0 - norm.momentum) * ns.running_var[j] +
                                    norm.momentum * var[j];
            }
        }
    }
    return ForwardResult{tape.value(tm.features), tape.value(tm.logits), tape.value(tm.probs)};
}

Var cross_entropy_mean(Tape& tape, Var logits, const std::vector<int>& labels) {
    Var shift = tape.row_max(logits);
    Var shifted = tape.sub(logits, shift);
    Var lse = tape.add(tape.log(tape.row_sum(tape.exp(shifted))), shift);
    Var zy = tape.index_select(logits, labels);
    return tape.mean(tape.sub(lse, zy));
}

namespace {

struct ParamRefs {
    std::vector<std::pair<Var, Matrix*>> mats;         // tape leaf -> destination
    std::vector<std::pair<Var, std::vector<double>*>> rows;
};

// Mean G-FCA over the batch, skipping (and counting) degenerate feature rows.
double mean_gfca_tolerant(const Matrix& features, const Matrix& classifier,
                          const std::vector<int>& labels, int* skipped = nullptr) {
    double sum = 0.0;
    int64_t n = 0;
    int skip = 0;
    for (int i = 0; i < features.rows; ++i) {
        try {
            const auto d = fca_distances(features.row(i), classifier);
            sum += gfca(d, labels[static_cast<size_t>(i)]);
            ++n;
        } catch (const DegenerateVectorError&) {
            ++skip;
        }
    }
    if (skipped) *skipped = skip;
    return n > 0 ? sum / static_cast<double>(n) : 0.0;
}

} // namespace

TrainTrace train_to_tpt(ModelParams& params, NormState& norm, const Dataset& train,
                        const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw InvalidArgument("train: epochs must be >= 1");
    if (cfg.batch_size < 2) throw InvalidArgument("train: batch size must be >= 2");

    Rng rng(cfg.seed);
    const int n = train.features.rows;
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    // Momentum buffers, one per parameter group.
    std::vector<Matrix> vel_w;
    std::vector<std::vector<double>> vel_g, vel_b;
    for (const auto& layer : params.layers) {
        vel_w.emplace_back(layer.weight.rows, layer.weight.cols);
        vel_g.emplace_back(layer.gamma.size(), 0.0);
        vel_b.emplace_back(layer.beta.size(), 0.0);
    }
    Matrix vel_cls(params.classifier.cols, params.classifier.rows); // transposed like the leaf

    TrainTrace trace;
    int first_zero_epoch = -1;
    int epoch = 0;
    while (true) {
        ++epoch;
        rng.shuffle(order);
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int b = std::min(cfg.batch_size, n - start);
            if (b < 2) break; // leftover single sample; batch statistics need >= 2
            Matrix xb(b, train.features.cols);
            std::vector<int> yb(static_cast<size_t>(b));
            for (int i = 0; i < b; ++i) {
                const int src = order[static_cast<size_t>(start + i)];
                for (int j = 0; j < train.features.cols; ++j) xb(i, j) = train.features(src, j);
                yb[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
            }

            Tape tape;
            ParamSelection sel;
            sel.extractor_weights = true;
            sel.affine = true;
            sel.classifier = true;
            TapeModel tm;
            Var loss;
            try {
                tm = build_forward_tape(tape, params, norm, xb, ForwardMode::Train, sel);
                loss = cross_entropy_mean(tape, tm.logits, yb);
            } catch (const NonFiniteError& e) {
                throw Error("training diverged at epoch " + std::to_string(epoch) + " (" +
                            e.what() + "); the learning rate is probably too high");
            }
            if (!std::isfinite(tape.scalar_value(loss)))
                throw Error("training diverged at epoch " + std::to_string(epoch) +
                            " (non-finite loss); the learning rate is probably too high");

            const GradMap grads = tape.backward(loss);
            auto step = [&](Var leaf, auto& value, auto& velocity, double decay) {
                const Matrix& g = grads.at(leaf.id);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    velocity[i] = cfg.momentum * velocity[i] + g.data[i] + decay * value[i];
                    value[i] -= cfg.lr * velocity[i];
                }
            };
            for (size_t li = 0; li < params.layers.size(); ++li) {
                step(tm.weights[li], params.layers[li].weight.data, vel_w[li].data,
                     cfg.weight_decay);
                step(tm.gammas[li], params.layers[li].gamma, vel_g[li], 0.0);
                step(tm.betas[li], params.layers[li].beta, vel_b[li], 0.0);
            }
            {
                const Matrix& g = grads.at(tm.classifier_t.id);
                for (int r = 0; r < g.rows; ++r)
                    for (int c = 0; c < g.cols; ++c) {
                        double& v = vel_cls(r, c);
                        v = cfg.momentum * v + g(r, c) +
                            cfg.classifier_weight_decay * params.classifier(c, r);
                        params.classifier(c, r) -= cfg.lr * v;
                    }
            }
            // Running statistics update from this batch.
            for (size_t li = 0; li < params.layers.size(); ++li) {
                const auto& [mean, var] = tape.batch_stats(tm.bn_nodes[li]);
                auto& ns = norm.layers[li];
                for (size_t j = 0; j < mean.size(); ++j) {
                    ns.running_mean[j] = (1.0 - norm.momentum) * ns.running_mean[j] +
                                         norm.momentum * mean[j];
                    ns.running_var[j] = (1.0 - norm.momentum) * ns.running_var[j] +
                                        norm.momentum * var[j];
                }
            }
        }

        // Epoch-end bookkeeping on the full train set, eval statistics.
        const ForwardResult fr = forward(params, norm, train.features, ForwardMode::Eval);
        int64_t correct = 0;
        for (int i = 0; i < n; ++i)
            if (argmax(fr.probs.row(i)) == train.labels[static_cast<size_t>(i)]) ++correct;
        const double acc = static_cast<double>(correct) / static_cast<double>(n);

        Tape ce_tape;
        Var logits_leaf = ce_tape.input(fr.logits);
        const double ce = ce_tape.scalar_value(cross_entropy_mean(ce_tape, logits_leaf, train.labels));

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_accuracy = acc;
        rec.ce_loss = ce;
        rec.mean_gfca = mean_gfca_tolerant(fr.features, params.classifier, train.labels);
        const NcReport nc = nc_suite(fr.features, train.labels, params.classifier);
        rec.nc1 = nc.nc1;
        rec.nc2 = nc.nc2;
        rec.nc3 = nc.nc3;
        rec.nc4 = nc.nc4;
        trace.push_back(rec);

        if (first_zero_epoch < 0 && correct == n) first_zero_epoch = epoch;
        int target = cfg.epochs;
        if (first_zero_epoch > 0)
            target = std::max(cfg.epochs, first_zero_epoch + cfg.post_zero_epochs);
        if (epoch >= target) break;
    }
    return trace;
}

double evaluate_accuracy(const ModelParams& params, const NormState& norm, const Dataset& d) {
    NormState scratch = norm;
    const ForwardResult fr = forward(params, scratch, d.features, ForwardMode::Eval);
    int64_t correct = 0;
    for (int i = 0; i < d.features.rows; ++i)
        if (argmax(fr.probs.row(i)) == d.labels[static_cast<size_t>(i)]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(d.features.rows);
}

namespace {

constexpr char kCkptMagic[4] = {'N', 'C', 'C', 'K'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw IoError("checkpoint truncated");
}

void write_doubles(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::istream& is, std::vector<double>& v, size_t n) {
    v.resize(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw IoError("checkpoint truncated in tensor block");
}

} // namespace

void save_checkpoint(const ModelParams& params, const NormState& norm, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write(kCkptMagic, 4);
    write_pod(os, kCkptVersion);
    write_pod(os, static_cast<uint32_t>(params.input_dim));
    write_pod(os, static_cast<uint32_t>(params.feature_dim));
    write_pod(os, static_cast<uint32_t>(params.num_classes));
    write_pod(os, static_cast<uint32_t>(params.layers.size()));
    write_pod(os, norm.momentum);
    write_pod(os, norm.eps);
    for (size_t li = 0; li < params.layers.size(); ++li) {
        const auto& layer = params.layers[li];
        write_pod(os, static_cast<uint32_t>(layer.weight.rows));
        write_pod(os, static_cast<uint32_t>(layer.weight.cols));
        write_pod(os, static_cast<uint8_t>(layer.act));
        write_doubles(os, layer.weight.data);
        write_doubles(os, layer.gamma);
        write_doubles(os, layer.beta);
        write_doubles(os, norm.layers[li].running_mean);
        write_doubles(os, norm.layers[li].running_var);
    }
    write_doubles(os, params.classifier.data);
    if (!os) throw IoError("short write to '" + path + "'");
}

std::pair<ModelParams, NormState> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw IoError("'" + path + "' is not a checkpoint (bad magic)");
    uint32_t version = 0;
    read_pod(is, version);
    if (version != kCkptVersion)
        throw IoError("checkpoint version " + std::to_string(version) + " unsupported");

    ModelParams params;
    NormState norm;
    uint32_t input_dim = 0, feature_dim = 0, num_classes = 0, num_layers = 0;
    read_pod(is, input_dim);
    read_pod(is, feature_dim);
    read_pod(is, num_classes);
    read_pod(is, num_layers);
    read_pod(is, norm.momentum);
    read_pod(is, norm.eps);
    params.input_dim = static_cast<int>(input_dim);
    params.feature_dim = static_cast<int>(feature_dim);
    params.num_classes = static_cast<int>(num_classes);
    for (uint32_t li = 0; li < num_layers; ++li) {
        uint32_t rows = 0, cols = 0;
        uint8_t act = 0;
        read_pod(is, rows);
        read_pod(is, cols);
        read_pod(is, act);
        LayerParams layer;
        layer.weight = Matrix(static_cast<int>(rows), static_cast<int>(cols));
        layer.act = static_cast<Activation>(act);
        is.read(reinterpret_cast<char*>(layer.weight.data.data()),
                static_cast<std::streamsize>(layer.weight.data.size() * sizeof(double)));
        if (!is) throw IoError("checkpoint truncated in weight block");
        read_doubles(is, layer.gamma, cols);
        read_doubles(is, layer.beta, cols);
        LayerNormState ns;
        read_doubles(is, ns.running_mean, cols);
        read_doubles(is, ns.running_var, cols);
        params.layers.push_back(std::move(layer));
        norm.layers.push_back(std::move(ns));
    }
    params.classifier = Matrix(static_cast<int>(num_classes), static_cast<int>(feature_dim));
    is.read(reinterpret_cast<char*>(params.classifier.data.data()),
            static_cast<std::streamsize>(params.classifier.data.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint truncated in classifier block");
    return {std::move(params), std::move(norm)};
}

} // namespace nctta
