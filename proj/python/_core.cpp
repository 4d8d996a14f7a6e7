#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "ragopt/error.hpp"
#include "ragopt/harness.hpp"

namespace py = pybind11;
using namespace ragopt;

namespace {

RunConfig to_config(const py::object& cfg) {
    if (cfg.is_none()) return {};
    if (py::isinstance<py::str>(cfg) || py::hasattr(cfg, "__fspath__")) return load_run_config(py::str(py::module_::import("os").attr("fspath")(cfg)).cast<std::string>());
    const auto text = py::module_::import("json").attr("dumps")(cfg, py::arg("default") = py::module_::import("builtins").attr("str")).cast<std::string>();
    return parse_run_config(text);
}

py::dict metrics(const RetrievalMetrics& m) {
    py::dict d;
    d["top1"] = m.top1;
    d["top3"] = m.top3;
    return d;
}

py::dict separation(const OodSeparation& s) {
    py::dict d;
    d["mean_top1_in"] = s.mean_top1_in;
    d["mean_top1_ood"] = s.mean_top1_ood;
    d["gap"] = s.gap();
    return d;
}

py::dict setting(const SettingResult& s) {
    py::dict d;
    d["setting"] = s.setting;
    d["tokens"] = s.tokens;
    d["output_tokens"] = s.output_tokens;
    d["saving"] = s.saving;
    d["accuracy"] = s.accuracy;
    py::list trace;
    for (const auto& t : s.trace) {
        py::dict row;
        row["step"] = t.step;
        row["query"] = t.query;
        row["route"] = std::string(to_string(t.route));
        row["top1_faq"] = t.top1.faq_id;
        row["top1_score"] = t.top1.score;
        row["input_tokens"] = t.input_tokens;
        row["verdict"] = std::string(to_string(t.rating.verdict));
        if (t.policy_probs) row["p_fetch"] = t.policy_probs->first;
        trace.append(row);
    }
    d["trace"] = trace;
    return d;
}

Action parse_action(const std::string& s) {
    if (s == "FETCH") return Action::Fetch;
    if (s == "NO_FETCH") return Action::NoFetch;
    throw ValidationError("unknown action '" + s + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "ragopt core bindings";

    static py::exception<Error> base(m, "RagoptError", PyExc_RuntimeError);
    static py::exception<ValidationError> validation(m, "ValidationError", base.ptr());
    static py::exception<ParseError> parse(m, "ParseError", base.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ValidationError& e) {
            PyErr_SetString(validation.ptr(), e.what());
        } catch (const ParseError& e) {
            PyErr_SetString(parse.ptr(), e.what());
        } catch (const Error& e) {
            PyErr_SetString(base.ptr(), e.what());
        }
    });

    m.def("count_tokens", &count_tokens, py::arg("text"));

    m.def(
        "reward",
        [](const std::string& action, std::optional<std::string> verdict) {
            std::optional<EvalRating> rating;
            if (verdict) {
                if (*verdict != "GOOD" && *verdict != "BAD") throw ValidationError("verdict must be GOOD or BAD");
                rating = EvalRating{*verdict == "GOOD" ? Verdict::Good : Verdict::Bad, ""};
            }
            return reward(parse_action(action), rating);
        },
        py::arg("action"), py::arg("verdict") = py::none());

    m.def(
        "discounted_returns", [](const std::vector<double>& r, double gamma) { return discounted_returns(r, gamma); }, py::arg("rewards"),
        py::arg("gamma") = 0.1);

    m.def(
        "decide",
        [](const std::string& mode, double score, std::optional<std::string> action, double threshold) {
            std::optional<Action> a;
            if (action) a = parse_action(*action);
            return std::string(to_string(decide({threshold, parse_gate_mode(mode)}, {"", score}, a).route));
        },
        py::arg("mode"), py::arg("score"), py::arg("action") = py::none(), py::arg("threshold") = kDefaultThreshold);

    m.def(
        "cosine", [](const std::vector<double>& a, const std::vector<double>& b) { return cosine(a, b); }, py::arg("a"), py::arg("b"));

    m.def(
        "embed", [](const std::string& text, std::size_t dimension) { return EmbeddingStore(TrigramHasher{TrigramHasher{}.seed, dimension}).embed(text); },
        py::arg("text"), py::arg("dimension") = 256);

    m.def(
        "retrieve",
        [](const std::filesystem::path& corpus_path, const std::string& query, std::size_t k, std::optional<std::filesystem::path> head_path) {
            const auto corpus = load_corpus(corpus_path);
            EmbeddingStore store;
            const auto head = head_path ? load_head(*head_path) : ProjectionHead::identity(store.dimension());
            std::vector<std::pair<std::string, double>> out;
            for (const auto& s : retrieve_topk(store, head, corpus, query, k).ranked) out.emplace_back(s.faq_id, s.score);
            return out;
        },
        py::arg("corpus"), py::arg("query"), py::arg("k") = 3, py::arg("head") = py::none());

    m.def(
        "parse_state",
        [](const std::string& s) {
            const auto st = parse_state(s);
            std::vector<std::pair<std::string, std::string>> prev;
            for (const auto& p : st.prev) prev.emplace_back(p.query, std::string(to_string(p.action)));
            return std::make_pair(prev, st.current_query);
        },
        py::arg("serialized"));
    m.def(
        "serialize_state",
        [](const std::vector<std::pair<std::string, std::string>>& prev, const std::string& current) {
            PolicyState st;
            for (const auto& [q, a] : prev) st.prev.push_back({q, parse_action(a)});
            st.current_query = current;
            return serialize_state(st);
        },
        py::arg("prev"), py::arg("current"));

    m.def("default_config", [] { return py::module_::import("json").attr("loads")(run_config_to_json(RunConfig{})); });

    m.def(
        "embed_train",
        [](const py::object& cfg) {
            const auto c = to_config(cfg);
            std::ostringstream out;
            EmbedReport r;
            {
                py::gil_scoped_release nogil;
                r = cmd_embed_train(c, out);
            }
            py::dict d;
            d["loss"] = r.loss_name;
            d["before"] = metrics(r.before);
            d["after"] = metrics(r.after);
            d["ood_before"] = separation(r.ood_before);
            d["ood_after"] = separation(r.ood_after);
            d["loss_trace"] = r.loss_trace;
            d["text"] = out.str();
            return d;
        },
        py::arg("config") = py::none());

    m.def(
        "policy_train",
        [](const py::object& cfg) {
            const auto c = to_config(cfg);
            std::ostringstream out;
            PolicyTrainReport r;
            {
                py::gil_scoped_release nogil;
                r = cmd_policy_train(c, out);
            }
            py::dict d;
            d["tuples"] = r.tuples;
            d["mean_reward_per_round"] = r.mean_reward_per_round;
            d["loss_trace"] = r.loss_trace;
            d["text"] = out.str();
            return d;
        },
        py::arg("config") = py::none());

    m.def(
        "report",
        [](const py::object& cfg) {
            const auto c = to_config(cfg);
            std::ostringstream out;
            Report r;
            {
                py::gil_scoped_release nogil;
                r = cmd_report(c, out);
            }
            py::list rows;
            for (const auto& s : r.settings) rows.append(setting(s));
            return rows;
        },
        py::arg("config") = py::none());

    m.def(
        "simulate",
        [](const py::object& cfg) {
            const auto c = to_config(cfg);
            std::ostringstream out;
            SettingResult s;
            {
                py::gil_scoped_release nogil;
                s = cmd_simulate(c, out);
            }
            return setting(s);
        },
        py::arg("config") = py::none());
}
