#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nctta/report.hpp"
#include "nctta/rng.hpp"
#include "nctta/tta.hpp"

namespace py = pybind11;
using namespace nctta;

namespace {

Matrix matrix_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() == 1) {
        Matrix m(1, static_cast<int>(a.shape(0)));
        std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(double));
        return m;
    }
    if (a.ndim() != 2) throw InvalidArgument("expected a 1-D or 2-D float64 array");
    Matrix m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::memcpy(m.data.data(), a.data(), m.data.size() * sizeof(double));
    return m;
}

py::array_t<double> numpy_from_matrix(const Matrix& m) {
    py::array_t<double> out({m.rows, m.cols});
    std::memcpy(out.mutable_data(), m.data.data(), m.data.size() * sizeof(double));
    return out;
}

std::vector<double> vector_from_numpy(const py::array_t<double>& a) {
    const Matrix m = matrix_from_numpy(a);
    return m.data;
}

struct PyModel {
    ModelParams params;
    NormState norm;
};

py::dict group_to_dict(const GroupStats& g) {
    py::dict d;
    d["defined"] = g.defined;
    d["low_confidence"] = g.low_confidence;
    d["count"] = g.count;
    d["mean_gfca"] = g.mean_gfca;
    d["var_gfca"] = g.var_gfca;
    d["mean_pfca"] = g.mean_pfca;
    d["var_pfca"] = g.var_pfca;
    return d;
}

py::dict steplog_to_dict(const StepLog& s) {
    py::dict d;
    d["step"] = s.step;
    d["batch_size"] = s.batch_size;
    d["accuracy"] = s.accuracy;
    d["pass_count"] = s.pass_count;
    d["skipped_degenerate"] = s.skipped_degenerate;
    d["mean_lambda"] = s.mean_lambda;
    d["mean_ent"] = s.mean_ent;
    d["mean_nc"] = s.mean_nc;
    d["mean_gfca"] = s.mean_gfca;
    d["mean_pfca"] = s.mean_pfca;
    d["update_applied"] = s.update_applied;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Desk-scale lab for feature-classifier alignment in test-time adaptation";
    m.attr("__version__") = kToolVersion;

    py::register_exception<Error>(m, "NcttaError");

    py::class_<Dataset>(m, "Dataset")
        .def_property_readonly("features",
                               [](const Dataset& d) { return numpy_from_matrix(d.features); })
        .def_property_readonly("labels",
                               [](const Dataset& d) {
                                   py::array_t<int> out(static_cast<py::ssize_t>(d.labels.size()));
                                   std::memcpy(out.mutable_data(), d.labels.data(),
                                               d.labels.size() * sizeof(int));
                                   return out;
                               })
        .def_property_readonly("centers",
                               [](const Dataset& d) { return numpy_from_matrix(d.centers); })
        .def_property_readonly("meta",
                               [](const Dataset& d) {
                                   py::dict meta;
                                   meta["seed"] = d.meta.seed;
                                   meta["num_classes"] = d.meta.num_classes;
                                   meta["dim"] = d.meta.dim;
                                   meta["num_samples"] = d.meta.num_samples;
                                   meta["generator"] = d.meta.generator;
                                   meta["spread"] = d.meta.spread;
                                   meta["shift"] = shift_kind_name(d.meta.shift);
                                   meta["severity"] = d.meta.severity;
                                   meta["class_counts"] = d.meta.class_counts;
                                   return meta;
                               })
        .def("__len__", [](const Dataset& d) { return d.size(); });

    m.def("make_clusters", &make_clusters, py::arg("num_classes"), py::arg("dim"),
          py::arg("n_per_class"), py::arg("spread"), py::arg("seed"), py::arg("imbalance") = 0.0);
    m.def(
        "apply_shift",
        [](const Dataset& d, const std::string& kind, int severity, uint64_t seed) {
            return apply_shift(d, ShiftSpec{shift_kind_from_name(kind), severity, seed});
        },
        py::arg("dataset"), py::arg("kind"), py::arg("severity"), py::arg("seed") = 0);
    m.def("split_per_class", &split_per_class, py::arg("dataset"), py::arg("n_first"));
    m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
    m.def("load_dataset", &load_dataset, py::arg("path"));
    m.def(
        "shift_magnitude",
        [](const std::string& kind, int severity, double spread) {
            return shift_magnitude(ShiftSpec{shift_kind_from_name(kind), severity, 0}, spread);
        },
        py::arg("kind"), py::arg("severity"), py::arg("spread") = 1.0);

    py::class_<PyModel>(m, "Model")
        .def_property_readonly("classifier",
                               [](const PyModel& mdl) {
                                   return numpy_from_matrix(mdl.params.classifier);
                               })
        .def_property_readonly("feature_dim",
                               [](const PyModel& mdl) { return mdl.params.feature_dim; })
        .def_property_readonly("num_classes",
                               [](const PyModel& mdl) { return mdl.params.num_classes; });

    m.def(
        "init_model",
        [](int input_dim, const std::vector<int>& hidden, int num_classes, uint64_t seed) {
            PyModel mdl;
            mdl.params = init_model(input_dim, hidden, num_classes, seed);
            mdl.norm = init_norm_state(mdl.params);
            return mdl;
        },
        py::arg("input_dim"), py::arg("hidden"), py::arg("num_classes"), py::arg("seed"));

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("lr", &TrainConfig::lr)
        .def_readwrite("momentum", &TrainConfig::momentum)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("post_zero_epochs", &TrainConfig::post_zero_epochs)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("classifier_weight_decay", &TrainConfig::classifier_weight_decay);

    m.def(
        "train_to_tpt",
        [](PyModel& mdl, const Dataset& train, const TrainConfig& cfg) {
            const TrainTrace trace = train_to_tpt(mdl.params, mdl.norm, train, cfg);
            py::list out;
            for (const auto& r : trace) {
                py::dict row;
                row["epoch"] = r.epoch;
                row["train_accuracy"] = r.train_accuracy;
                row["ce_loss"] = r.ce_loss;
                row["mean_gfca"] = r.mean_gfca;
                row["nc1"] = r.nc1;
                row["nc2"] = r.nc2;
                row["nc3"] = r.nc3;
                row["nc4"] = r.nc4;
                out.append(row);
            }
            return out;
        },
        py::arg("model"), py::arg("train"), py::arg("config") = TrainConfig{});

    m.def(
        "forward",
        [](PyModel& mdl, const py::array_t<double>& x, const std::string& mode) {
            ForwardMode fm = ForwardMode::Eval;
            if (mode == "train") fm = ForwardMode::Train;
            else if (mode == "batchstat") fm = ForwardMode::BatchStat;
            else if (mode != "eval") throw InvalidArgument("mode must be train|eval|batchstat");
            const ForwardResult fr = forward(mdl.params, mdl.norm, matrix_from_numpy(x), fm);
            return py::make_tuple(numpy_from_matrix(fr.features), numpy_from_matrix(fr.logits),
                                  numpy_from_matrix(fr.probs));
        },
        py::arg("model"), py::arg("x"), py::arg("mode") = "eval");

    m.def(
        "evaluate_accuracy",
        [](const PyModel& mdl, const Dataset& d) {
            return evaluate_accuracy(mdl.params, mdl.norm, d);
        },
        py::arg("model"), py::arg("dataset"));

    m.def(
        "save_checkpoint",
        [](const PyModel& mdl, const std::string& path) {
            save_checkpoint(mdl.params, mdl.norm, path);
        },
        py::arg("model"), py::arg("path"));
    m.def(
        "load_checkpoint",
        [](const std::string& path) {
            auto [params, norm] = load_checkpoint(path);
            return PyModel{std::move(params), std::move(norm)};
        },
        py::arg("path"));

    m.def("softmax", [](const py::array_t<double>& z) { return softmax(vector_from_numpy(z)); });
    m.def("l2_normalize",
          [](const py::array_t<double>& v) { return l2_normalized(vector_from_numpy(v)); });
    m.def("entropy", [](const py::array_t<double>& p) { return entropy(vector_from_numpy(p)); });
    m.def("entropy_filter", &entropy_filter, py::arg("entropies"), py::arg("gamma_ent"));
    m.def(
        "fca_distances",
        [](const py::array_t<double>& h, const py::array_t<double>& w) {
            return fca_distances(vector_from_numpy(h), matrix_from_numpy(w)).d;
        },
        py::arg("h"), py::arg("classifier"));
    m.def(
        "hybrid_target",
        [](const std::vector<double>& d, const std::vector<double>& p, double alpha,
           double epsilon, int k) {
            FcaVector fv;
            fv.d = d;
            const HybridTarget t = hybrid_target(fv, p, alpha, epsilon, k);
            py::dict out;
            out["y_tilde"] = t.y_tilde;
            out["order"] = t.order;
            out["target_set"] = t.target_set;
            return out;
        },
        py::arg("distances"), py::arg("probs"), py::arg("alpha"), py::arg("epsilon"),
        py::arg("k"));
    m.def("sample_weight", &sample_weight, py::arg("l_ent"), py::arg("pfca"), py::arg("tau_ent"),
          py::arg("nu"), py::arg("eta"));
    m.def(
        "loss_nc_value",
        [](const std::vector<double>& d, const std::vector<double>& cosines,
           const std::vector<int>& target_set, const std::string& variant, double margin) {
            return loss_nc_value(d, cosines, target_set, loss_variant_from_name(variant), margin);
        },
        py::arg("distances"), py::arg("cosines"), py::arg("target_set"),
        py::arg("variant") = "infonce", py::arg("tau_margin") = 1.0);

    m.def(
        "nc_suite",
        [](const py::array_t<double>& features, const std::vector<int>& labels,
           const py::array_t<double>& classifier) {
            const NcReport r =
                nc_suite(matrix_from_numpy(features), labels, matrix_from_numpy(classifier));
            py::dict out;
            out["nc1"] = r.nc1;
            out["nc2"] = r.nc2;
            out["nc2_etf"] = r.nc2_etf;
            out["nc3"] = r.nc3;
            out["nc4"] = r.nc4;
            out["nc3plus"] = r.nc3plus;
            return out;
        },
        py::arg("features"), py::arg("labels"), py::arg("classifier"));

    m.def(
        "misalignment_stats",
        [](const py::array_t<double>& features, const py::array_t<double>& classifier,
           const std::vector<int>& labels, const py::array_t<double>& probs) {
            const MisalignmentStats s = misalignment_stats(
                matrix_from_numpy(features), matrix_from_numpy(classifier), labels,
                matrix_from_numpy(probs));
            py::dict out;
            out["correct"] = group_to_dict(s.correct);
            out["wrong"] = group_to_dict(s.wrong);
            return out;
        },
        py::arg("features"), py::arg("classifier"), py::arg("labels"), py::arg("probs"));

    py::class_<AdaptConfig>(m, "AdaptConfig")
        .def(py::init<>())
        .def_readwrite("alpha", &AdaptConfig::alpha)
        .def_readwrite("epsilon", &AdaptConfig::epsilon)
        .def_readwrite("k", &AdaptConfig::k)
        .def_readwrite("gamma_ent", &AdaptConfig::gamma_ent)
        .def_readwrite("tau_ent", &AdaptConfig::tau_ent)
        .def_readwrite("nu", &AdaptConfig::nu)
        .def_readwrite("eta", &AdaptConfig::eta)
        .def_readwrite("tau_margin", &AdaptConfig::tau_margin)
        .def_readwrite("lr", &AdaptConfig::lr)
        .def_readwrite("batch_size", &AdaptConfig::batch_size)
        .def_readwrite("ent_weight", &AdaptConfig::ent_weight)
        .def_readwrite("nc_weight", &AdaptConfig::nc_weight)
        .def_readwrite("use_filter", &AdaptConfig::use_filter)
        .def_readwrite("use_lambda", &AdaptConfig::use_lambda)
        .def_property(
            "method", [](const AdaptConfig& c) { return std::string(method_name(c.method)); },
            [](AdaptConfig& c, const std::string& s) { c.method = method_from_name(s); })
        .def_property(
            "variant",
            [](const AdaptConfig& c) { return std::string(loss_variant_name(c.variant)); },
            [](AdaptConfig& c, const std::string& s) { c.variant = loss_variant_from_name(s); })
        .def_property(
            "policy",
            [](const AdaptConfig& c) { return std::string(update_policy_name(c.policy)); },
            [](AdaptConfig& c, const std::string& s) { c.policy = update_policy_from_name(s); });

    m.def(
        "run_scenario",
        [](PyModel& mdl, const Dataset& source, const std::string& scenario,
           const std::string& shift, int severity, const std::vector<int>& severities,
           const AdaptConfig& cfg, uint64_t seed) {
            ScenarioSpec spec;
            spec.kind = scenario_kind_from_name(scenario);
            spec.shift = shift_kind_from_name(shift);
            spec.severity = severity;
            spec.severities = severities;
            const RunLog log = run_scenario(mdl.params, mdl.norm, source, spec, cfg, seed);
            py::dict out;
            out["stream_accuracy"] = log.stream_accuracy;
            out["total_samples"] = log.total_samples;
            out["total_correct"] = log.total_correct;
            out["final_mean_gfca"] = log.final_mean_gfca;
            py::list segs;
            for (const auto& s : log.segments) {
                py::dict seg;
                seg["severity"] = s.severity;
                seg["samples"] = s.samples;
                seg["correct"] = s.correct;
                seg["accuracy"] = s.accuracy;
                segs.append(seg);
            }
            out["segments"] = segs;
            py::list steps;
            for (const auto& s : log.steps) steps.append(steplog_to_dict(s));
            out["steps"] = steps;
            return out;
        },
        py::arg("model"), py::arg("source"), py::arg("scenario") = "mild",
        py::arg("shift") = "gaussian_noise", py::arg("severity") = 3,
        py::arg("severities") = std::vector<int>{1, 2, 3, 4, 5},
        py::arg("config") = AdaptConfig{}, py::arg("seed") = 0);
}
