#include "nctta/report.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "nctta/rng.hpp"

namespace nctta {

namespace fs = std::filesystem;
using nlohmann::json;

Experiment experiment_from_config(const Config& cfg) {
    cfg.expect_keys("data", {"classes", "dim", "train_per_class", "test_per_class", "spread",
                             "seed", "imbalance"});
    cfg.expect_keys("train", {"hidden", "epochs", "lr", "momentum", "batch_size", "weight_decay",
                              "classifier_weight_decay", "post_zero_epochs", "seed"});
    cfg.expect_keys("adapt", {"method", "variant", "policy", "alpha", "epsilon", "k", "gamma_ent",
                              "tau_ent", "nu", "eta", "tau_margin", "lr", "batch_size",
                              "ent_weight", "nc_weight", "use_filter", "use_lambda"});

    Experiment exp;
    exp.num_classes = cfg.get_int("data", "classes");
    exp.dim = cfg.get_int("data", "dim");
    exp.train_per_class = cfg.get_int("data", "train_per_class");
    exp.test_per_class = cfg.get_int("data", "test_per_class", 0);
    exp.spread = cfg.get_double("data", "spread");
    exp.data_seed = cfg.get_u64("data", "seed", 7);
    exp.imbalance = cfg.get_double("data", "imbalance", 0.0);

    if (cfg.has("train", "hidden")) {
        exp.hidden = cfg.get_int_list("train", "hidden");
    } else {
        exp.hidden = {32, 32};
    }
    exp.train_cfg.epochs = cfg.get_int("train", "epochs", 300);
    exp.train_cfg.lr = cfg.get_double("train", "lr", 0.1);
    exp.train_cfg.momentum = cfg.get_double("train", "momentum", 0.9);
    exp.train_cfg.batch_size = cfg.get_int("train", "batch_size", 200);
    exp.train_cfg.weight_decay = cfg.get_double("train", "weight_decay", 0.008);
    exp.train_cfg.classifier_weight_decay =
        cfg.get_double("train", "classifier_weight_decay", 0.02);
    exp.train_cfg.post_zero_epochs = cfg.get_int("train", "post_zero_epochs", 100);
    exp.train_cfg.seed = cfg.get_u64("train", "seed", 1);
    exp.model_seed = exp.train_cfg.seed;

    AdaptConfig& a = exp.adapt_cfg;
    a.method = method_from_name(cfg.get_string("adapt", "method", "nctta"));
    a.variant = loss_variant_from_name(cfg.get_string("adapt", "variant", "infonce"));
    a.policy = update_policy_from_name(cfg.get_string("adapt", "policy", "affine_only"));
    a.alpha = cfg.get_double("adapt", "alpha", 0.5);
    a.epsilon = cfg.get_double("adapt", "epsilon", 1.0);
    a.k = cfg.get_int("adapt", "k", 2);
    const std::string gamma = cfg.get_string("adapt", "gamma_ent", "auto");
    if (gamma != "auto") a.gamma_ent = cfg.get_double("adapt", "gamma_ent");
    const std::string tau = cfg.get_string("adapt", "tau_ent", "auto");
    if (tau != "auto") a.tau_ent = cfg.get_double("adapt", "tau_ent");
    a.nu = cfg.get_double("adapt", "nu", 1.0);
    a.eta = cfg.get_double("adapt", "eta", 1.0);
    a.tau_margin = cfg.get_double("adapt", "tau_margin", 1.0);
    a.lr = cfg.get_double("adapt", "lr", 1e-3);
    a.batch_size = cfg.get_int("adapt", "batch_size", 64);
    a.ent_weight = cfg.get_double("adapt", "ent_weight", 1.0);
    a.nc_weight = cfg.get_double("adapt", "nc_weight", 1.0);
    a.use_filter = cfg.get_bool("adapt", "use_filter", true);
    a.use_lambda = cfg.get_bool("adapt", "use_lambda", true);
    return exp;
}

std::pair<Dataset, Dataset> build_datasets(const Experiment& exp) {
    const Dataset full = make_clusters(exp.num_classes, exp.dim,
                                       exp.train_per_class + exp.test_per_class, exp.spread,
                                       exp.data_seed, exp.imbalance);
    return split_per_class(full, exp.train_per_class);
}

Matrix pca_project_2d(const Matrix& features) {
    const int n = features.rows, d = features.cols;
    if (n < 2 || d < 2) throw InvalidArgument("pca: need at least a 2x2 feature matrix");
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = features(i, j);
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = (x.transpose() * x) / std::max(1, n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Matrix out(n, 2);
    for (int comp = 0; comp < 2; ++comp) {
        Eigen::VectorXd v = es.eigenvectors().col(d - 1 - comp); // descending eigenvalues
        // Deterministic sign: largest-magnitude coordinate positive.
        int arg = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(v(j)) > std::abs(v(arg))) arg = j;
        if (v(arg) < 0) v = -v;
        const Eigen::VectorXd proj = x * v;
        for (int i = 0; i < n; ++i) out(i, comp) = proj(i);
    }
    return out;
}

double silhouette_score(const Matrix& points, const std::vector<int>& labels) {
    const int n = points.rows;
    if (n != static_cast<int>(labels.size()))
        throw InvalidArgument("silhouette: label count mismatch");
    int num_classes = 0;
    for (int y : labels) num_classes = std::max(num_classes, y + 1);
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    for (int y : labels) ++counts[static_cast<size_t>(y)];

    auto dist = [&](int a, int b) {
        double s = 0.0;
        for (int j = 0; j < points.cols; ++j) {
            const double diff = points(a, j) - points(b, j);
            s += diff * diff;
        }
        return std::sqrt(s);
    };

    double total = 0.0;
    std::vector<double> mean_to_class(static_cast<size_t>(num_classes));
    for (int i = 0; i < n; ++i) {
        std::fill(mean_to_class.begin(), mean_to_class.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            mean_to_class[static_cast<size_t>(labels[static_cast<size_t>(j)])] += dist(i, j);
        }
        const int yi = labels[static_cast<size_t>(i)];
        if (counts[static_cast<size_t>(yi)] < 2) continue; // singleton scores 0
        const double a = mean_to_class[static_cast<size_t>(yi)] /
                         static_cast<double>(counts[static_cast<size_t>(yi)] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < num_classes; ++c) {
            if (c == yi || counts[static_cast<size_t>(c)] == 0) continue;
            b = std::min(b, mean_to_class[static_cast<size_t>(c)] /
                                static_cast<double>(counts[static_cast<size_t>(c)]));
        }
        if (std::isfinite(b)) total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

void write_projection_csv(const std::vector<ProjectionRow>& rows, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "sample_id,method,x0,x1,y,y_hat\n";
    os.precision(17);
    for (const auto& r : rows)
        os << r.sample_id << ',' << r.method << ',' << r.x0 << ',' << r.x1 << ',' << r.y << ','
           << r.y_hat << '\n';
}

void write_train_trace_csv(const TrainTrace& trace, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "epoch,train_accuracy,ce_loss,mean_gfca,nc1,nc2,nc3,nc4\n";
    os.precision(17);
    for (const auto& r : trace)
        os << r.epoch << ',' << r.train_accuracy << ',' << r.ce_loss << ',' << r.mean_gfca << ','
           << r.nc1 << ',' << r.nc2 << ',' << r.nc3 << ',' << r.nc4 << '\n';
}

namespace {

json config_echo(const Config& cfg) {
    json echo = json::object();
    for (const auto& [section, kv] : cfg.sections()) {
        json s = json::object();
        for (const auto& [k, v] : kv) s[k] = v;
        echo[section] = s;
    }
    return echo;
}

json adapt_cfg_json(const AdaptConfig& a) {
    return json{{"method", method_name(a.method)},
                {"variant", loss_variant_name(a.variant)},
                {"policy", update_policy_name(a.policy)},
                {"alpha", a.alpha},
                {"epsilon", a.epsilon},
                {"k", a.k},
                {"gamma_ent", std::isnan(a.gamma_ent) ? json("auto") : json(a.gamma_ent)},
                {"tau_ent", std::isnan(a.tau_ent) ? json("auto") : json(a.tau_ent)},
                {"nu", a.nu},
                {"eta", a.eta},
                {"tau_margin", a.tau_margin},
                {"lr", a.lr},
                {"batch_size", a.batch_size},
                {"ent_weight", a.ent_weight},
                {"nc_weight", a.nc_weight},
                {"use_filter", a.use_filter},
                {"use_lambda", a.use_lambda}};
}

struct ManifestWriter {
    json body;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    ManifestWriter(const std::string& command, const Config& cfg) {
        body["tool"] = "nctta";
        body["version"] = kToolVersion;
        body["command"] = command;
        body["config"] = config_echo(cfg);
        body["artifacts"] = json::array();
    }
    void artifact(const std::string& path) { body["artifacts"].push_back(path); }
    std::string write(const std::string& out_dir) {
        body["wall_clock_sec"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const std::string path = (fs::path(out_dir) / "manifest.json").string();
        std::ofstream os(path);
        if (!os) throw IoError("cannot open '" + path + "' for writing");
        os << body.dump(2) << "\n";
        return path;
    }
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

Dataset load_or_build_test(const Experiment& exp, const CliOverrides& opt) {
    if (!opt.data_path.empty()) return load_dataset(opt.data_path);
    auto [train, test] = build_datasets(exp);
    return test;
}

json segments_json(const RunLog& log) {
    json segs = json::array();
    for (const auto& s : log.segments)
        segs.push_back(json{{"severity", s.severity},
                            {"samples", s.samples},
                            {"correct", s.correct},
                            {"accuracy", s.accuracy}});
    return segs;
}

ScenarioSpec scenario_from(const CliOverrides& opt) {
    ScenarioSpec spec;
    spec.kind = scenario_kind_from_name(opt.scenario);
    spec.shift = shift_kind_from_name(opt.shift);
    spec.severity = opt.severity;
    spec.severities = opt.severities;
    return spec;
}

void apply_overrides(AdaptConfig& a, const CliOverrides& opt) {
    if (!opt.method.empty()) a.method = method_from_name(opt.method);
    if (!opt.variant.empty()) a.variant = loss_variant_from_name(opt.variant);
}

} // namespace

std::string cmd_train(const Config& cfg, const std::string& out_dir, const CliOverrides& opt) {
    ensure_dir(out_dir);
    ManifestWriter manifest("train", cfg);
    const Experiment exp = experiment_from_config(cfg);
    auto [train, test] = build_datasets(exp);

    ModelParams params = init_model(exp.dim, exp.hidden, exp.num_classes, exp.model_seed);
    NormState norm = init_norm_state(params);
    const TrainTrace trace = train_to_tpt(params, norm, train, exp.train_cfg);

    const std::string ckpt = (fs::path(out_dir) / "checkpoint.bin").string();
    save_checkpoint(params, norm, ckpt);
    manifest.artifact(ckpt);
    const std::string trace_path = (fs::path(out_dir) / "train_trace.csv").string();
    write_train_trace_csv(trace, trace_path);
    manifest.artifact(trace_path);
    if (opt.save_data) {
        const std::string train_path = (fs::path(out_dir) / "train.ds").string();
        const std::string test_path = (fs::path(out_dir) / "test.ds").string();
        save_dataset(train, train_path);
        save_dataset(test, test_path);
        manifest.artifact(train_path);
        manifest.artifact(test_path);
    }

    manifest.body["seeds"] = {{"data", exp.data_seed}, {"train", exp.train_cfg.seed}};
    manifest.body["final_epoch"] = trace.back().epoch;
    manifest.body["final_train_accuracy"] = trace.back().train_accuracy;
    manifest.body["final_mean_gfca"] = trace.back().mean_gfca;
    manifest.body["test_accuracy"] = evaluate_accuracy(params, norm, test);
    return manifest.write(out_dir);
}

std::string cmd_eval(const Config& cfg, const std::string& checkpoint, const std::string& out_dir,
                     const CliOverrides& opt) {
    ensure_dir(out_dir);
    ManifestWriter manifest("eval", cfg);
    const Experiment exp = experiment_from_config(cfg);
    auto [params, norm] = load_checkpoint(checkpoint);
    Dataset test = load_or_build_test(exp, opt);
    if (opt.severity > 0)
        test = apply_shift(test, ShiftSpec{shift_kind_from_name(opt.shift), opt.severity,
                                           scenario_shift_seed(opt.seed)});
    manifest.body["checkpoint"] = checkpoint;
    manifest.body["shift"] = shift_kind_name(test.meta.shift);
    manifest.body["severity"] = test.meta.severity;
    manifest.body["samples"] = test.size();
    manifest.body["accuracy"] = evaluate_accuracy(params, norm, test);
    return manifest.write(out_dir);
}

std::string cmd_adapt(const Config& cfg, const std::string& checkpoint, const std::string& out_dir,
                      const CliOverrides& opt) {
    ensure_dir(out_dir);
    ManifestWriter manifest("adapt", cfg);
    const Experiment exp = experiment_from_config(cfg);
    auto [params, norm] = load_checkpoint(checkpoint);
    const Dataset test = load_or_build_test(exp, opt);

    AdaptConfig a = exp.adapt_cfg;
    apply_overrides(a, opt);
    const ScenarioSpec spec = scenario_from(opt);
    const RunLog log = run_scenario(params, norm, test, spec, a, opt.seed);

    const std::string steps = (fs::path(out_dir) / "steps.csv").string();
    write_steplog_csv(log, steps);
    manifest.artifact(steps);
    const std::string adapted = (fs::path(out_dir) / "adapted_checkpoint.bin").string();
    save_checkpoint(params, norm, adapted);
    manifest.artifact(adapted);

    manifest.body["checkpoint"] = checkpoint;
    manifest.body["scenario"] = scenario_kind_name(spec.kind);
    manifest.body["shift"] = shift_kind_name(spec.shift);
    manifest.body["adapt"] = adapt_cfg_json(a);
    manifest.body["seeds"] = {{"stream", opt.seed}};
    manifest.body["segments"] = segments_json(log);
    manifest.body["stream_accuracy"] = log.stream_accuracy;
    manifest.body["final_mean_gfca"] = log.final_mean_gfca;
    return manifest.write(out_dir);
}

std::string cmd_metrics(const Config& cfg, const std::string& checkpoint,
                        const std::string& out_dir, const CliOverrides& opt) {
    ensure_dir(out_dir);
    ManifestWriter manifest("metrics", cfg);
    const Experiment exp = experiment_from_config(cfg);
    auto [params, norm] = load_checkpoint(checkpoint);
    Dataset data = load_or_build_test(exp, opt);
    if (opt.severity > 0)
        data = apply_shift(data, ShiftSpec{shift_kind_from_name(opt.shift), opt.severity,
                                           scenario_shift_seed(opt.seed)});

    NormState scratch = norm;
    const ForwardResult fr = forward(params, scratch, data.features, ForwardMode::Eval);
    std::vector<SampleMetricsRow> rows;
    const MisalignmentStats stats =
        misalignment_stats(fr.features, params.classifier, data.labels, fr.probs, &rows);
    const NcReport nc = nc_suite(fr.features, data.labels, params.classifier);

    const std::string csv = (fs::path(out_dir) / "metrics.csv").string();
    write_sample_metrics_csv(rows, csv);
    manifest.artifact(csv);

    auto group_json = [](const GroupStats& g) {
        return json{{"defined", g.defined},       {"low_confidence", g.low_confidence},
                    {"count", g.count},           {"mean_gfca", g.mean_gfca},
                    {"var_gfca", g.var_gfca},     {"mean_pfca", g.mean_pfca},
                    {"var_pfca", g.var_pfca}};
    };
    json report{{"nc1", nc.nc1},
                {"nc2", nc.nc2},
                {"nc2_etf", nc.nc2_etf},
                {"nc3", nc.nc3},
                {"nc4", nc.nc4},
                {"nc3plus", nc.nc3plus},
                {"correct", group_json(stats.correct)},
                {"wrong", group_json(stats.wrong)}};
    const std::string report_path = (fs::path(out_dir) / "nc_report.json").string();
    {
        std::ofstream os(report_path);
        if (!os) throw IoError("cannot open '" + report_path + "' for writing");
        os << report.dump(2) << "\n";
    }
    manifest.artifact(report_path);
    manifest.body["checkpoint"] = checkpoint;
    manifest.body["shift"] = shift_kind_name(data.meta.shift);
    manifest.body["severity"] = data.meta.severity;
    manifest.body["report"] = report;
    return manifest.write(out_dir);
}

std::string cmd_project(const Config& cfg, const std::vector<std::string>& checkpoints,
                        const std::vector<std::string>& tags, const std::string& out_dir,
                        const CliOverrides& opt) {
    if (checkpoints.empty()) throw InvalidArgument("project: need at least one checkpoint");
    if (!tags.empty() && tags.size() != checkpoints.size())
        throw InvalidArgument("project: need one tag per checkpoint");
    ensure_dir(out_dir);
    ManifestWriter manifest("project", cfg);
    const Experiment exp = experiment_from_config(cfg);
    Dataset data = load_or_build_test(exp, opt);
    if (opt.severity > 0)
        data = apply_shift(data, ShiftSpec{shift_kind_from_name(opt.shift), opt.severity,
                                           scenario_shift_seed(opt.seed)});

    std::vector<ProjectionRow> rows;
    json scores = json::object();
    for (size_t m = 0; m < checkpoints.size(); ++m) {
        const std::string tag = tags.empty() ? "model" + std::to_string(m) : tags[m];
        auto [params, norm] = load_checkpoint(checkpoints[m]);
        NormState scratch = norm;
        const ForwardResult fr = forward(params, scratch, data.features, ForwardMode::Eval);
        const Matrix proj = pca_project_2d(fr.features);
        for (int i = 0; i < proj.rows; ++i) {
            rows.push_back(ProjectionRow{i, tag, proj(i, 0), proj(i, 1),
                                         data.labels[static_cast<size_t>(i)],
                                         argmax(fr.probs.row(i))});
        }
        scores[tag] = silhouette_score(proj, data.labels);
    }
    const std::string csv = (fs::path(out_dir) / "projection.csv").string();
    write_projection_csv(rows, csv);
    manifest.artifact(csv);
    manifest.body["silhouette"] = scores;
    manifest.body["shift"] = shift_kind_name(data.meta.shift);
    manifest.body["severity"] = data.meta.severity;
    return manifest.write(out_dir);
}

std::vector<std::pair<std::string, std::vector<double>>> parse_sweep_spec(const std::string& spec) {
    if (spec.empty()) throw InvalidArgument("sweep: empty spec");
    std::vector<std::pair<std::string, std::vector<double>>> axes;
    std::istringstream terms(spec);
    std::string term;
    while (std::getline(terms, term, ',')) {
        const auto eq = term.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("sweep: term '" + term + "' is not name=lo:hi[:step]");
        const std::string name = term.substr(0, eq);
        const std::string range = term.substr(eq + 1);
        std::vector<double> parts;
        std::istringstream rs(range);
        std::string piece;
        while (std::getline(rs, piece, ':')) {
            try {
                parts.push_back(std::stod(piece));
            } catch (const std::exception&) {
                throw InvalidArgument("sweep: cannot parse '" + piece + "' in term '" + term + "'");
            }
        }
        if (parts.size() < 2 || parts.size() > 3)
            throw InvalidArgument("sweep: term '" + term + "' needs lo:hi or lo:hi:step");
        const double lo = parts[0], hi = parts[1];
        const double step = parts.size() == 3 ? parts[2] : 1.0;
        if (step <= 0 || hi < lo)
            throw InvalidArgument("sweep: bad range in term '" + term + "'");
        std::vector<double> values;
        for (double v = lo; v <= hi + 1e-12; v += step) values.push_back(v);
        axes.emplace_back(name, std::move(values));
    }
    return axes;
}

namespace {

void set_sweep_value(AdaptConfig& a, const std::string& name, double v) {
    if (name == "alpha") a.alpha = v;
    else if (name == "epsilon") a.epsilon = v;
    else if (name == "k") a.k = static_cast<int>(std::lround(v));
    else if (name == "gamma_ent") a.gamma_ent = v;
    else if (name == "tau_ent") a.tau_ent = v;
    else if (name == "nu") a.nu = v;
    else if (name == "eta") a.eta = v;
    else if (name == "tau_margin") a.tau_margin = v;
    else if (name == "lr") a.lr = v;
    else if (name == "batch_size") a.batch_size = static_cast<int>(std::lround(v));
    else throw InvalidArgument("sweep: unknown parameter '" + name + "'");
}

} // namespace

std::string cmd_sweep(const Config& cfg, const std::string& checkpoint, const std::string& spec,
                      const std::string& out_dir, const CliOverrides& opt) {
    ensure_dir(out_dir);
    ManifestWriter manifest("sweep", cfg);
    const Experiment exp = experiment_from_config(cfg);
    auto [params0, norm0] = load_checkpoint(checkpoint);
    const Dataset test = load_or_build_test(exp, opt);
    const auto axes = parse_sweep_spec(spec);
    const ScenarioSpec scenario = scenario_from(opt);

    // Cartesian product over the axes.
    std::vector<size_t> idx(axes.size(), 0);
    const std::string summary_path = (fs::path(out_dir) / "sweep_summary.csv").string();
    std::ofstream summary(summary_path);
    if (!summary) throw IoError("cannot open '" + summary_path + "' for writing");
    summary << "cell";
    for (const auto& [name, _] : axes) summary << ',' << name;
    summary << ",stream_accuracy,final_mean_gfca\n";
    summary.precision(17);

    int cell = 0;
    bool done = false;
    while (!done) {
        AdaptConfig a = exp.adapt_cfg;
        apply_overrides(a, opt);
        std::string cell_name = "cell" + std::to_string(cell);
        for (size_t ax = 0; ax < axes.size(); ++ax)
            set_sweep_value(a, axes[ax].first, axes[ax].second[idx[ax]]);

        ModelParams params = params0;
        NormState norm = norm0;
        const RunLog log = run_scenario(params, norm, test, scenario, a, opt.seed);
        const std::string cell_dir = (fs::path(out_dir) / cell_name).string();
        ensure_dir(cell_dir);
        const std::string steps = (fs::path(cell_dir) / "steps.csv").string();
        write_steplog_csv(log, steps);
        manifest.artifact(steps);

        summary << cell_name;
        for (size_t ax = 0; ax < axes.size(); ++ax) summary << ',' << axes[ax].second[idx[ax]];
        summary << ',' << log.stream_accuracy << ',' << log.final_mean_gfca << '\n';

        ++cell;
        done = true;
        for (size_t ax = axes.size(); ax-- > 0;) {
            if (++idx[ax] < axes[ax].second.size()) {
                done = false;
                break;
            }
            idx[ax] = 0;
        }
    }
    summary.close();
    manifest.artifact(summary_path);
    manifest.body["cells"] = cell;
    manifest.body["checkpoint"] = checkpoint;
    return manifest.write(out_dir);
}

} // namespace nctta
