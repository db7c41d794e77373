#include "ehrseq/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

namespace ehrseq::runconfig {

using nlohmann::json;

cohort::CohortRules RunConfig::effective_rules() const {
    return rules ? *rules : gen.derive_rules();
}

namespace {

std::set<std::string> keys_of(const json& j) {
    std::set<std::string> out;
    for (const auto& [k, v] : j.items()) out.insert(k);
    return out;
}

void warn_unknown(const json& j, const std::set<std::string>& known,
                  const std::string& prefix, std::vector<std::string>& warnings) {
    if (!j.is_object()) return;
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) warnings.push_back("unknown field: " + prefix + k);
}

corpus::Task parse_task(const std::string& name) {
    auto t = corpus::task_from_string(name);
    if (!t) throw std::runtime_error("unknown task '" + name + "'");
    return *t;
}

corpus::Modalities parse_modalities(const std::string& slug) {
    auto m = corpus::Modalities::parse(slug);
    if (!m) throw std::runtime_error("unknown modalities '" + slug + "'");
    return *m;
}

}  // namespace

LoadResult parse(const json& j) {
    if (!j.is_object()) throw std::runtime_error("run config must be a JSON object");
    LoadResult out;
    RunConfig& c = out.config;

    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);

    if (j.contains("inputs")) {
        const json& ji = j.at("inputs");
        c.inputs.events_csv = ji.value("events_csv", "");
        c.inputs.labels_csv = ji.value("labels_csv", "");
        warn_unknown(ji, {"events_csv", "labels_csv"}, "inputs.", out.warnings);
    }

    if (j.contains("gen")) {
        c.gen = j.at("gen").get<syngen::GenConfig>();
        warn_unknown(j.at("gen"), keys_of(json(syngen::GenConfig{})), "gen.", out.warnings);
    }
    // the global seed stands in wherever no explicit seed was given
    if (!j.contains("gen") || !j.at("gen").contains("seed")) c.gen.seed = c.seed;

    if (j.contains("rules")) {
        c.rules = j.at("rules").get<cohort::CohortRules>();
        warn_unknown(j.at("rules"), keys_of(json(cohort::CohortRules{})), "rules.",
                     out.warnings);
    }

    if (j.contains("corpus")) {
        const json& jc = j.at("corpus");
        c.corpus_settings.max_len = jc.value("max_len", c.corpus_settings.max_len);
        c.corpus_settings.min_frequency =
            jc.value("min_frequency", c.corpus_settings.min_frequency);
        if (jc.contains("modalities"))
            c.corpus_settings.modalities =
                parse_modalities(jc.at("modalities").get<std::string>());
        c.corpus_settings.detection_horizon_days =
            jc.value("detection_horizon_days", c.corpus_settings.detection_horizon_days);
        warn_unknown(jc, {"max_len", "min_frequency", "modalities",
                          "detection_horizon_days"},
                     "corpus.", out.warnings);
    }

    if (j.contains("split")) {
        const json& js = j.at("split");
        c.split.seed = js.value("seed", c.split.seed);
        c.split.train_fraction = js.value("train_fraction", c.split.train_fraction);
        c.split.val_fraction = js.value("val_fraction", c.split.val_fraction);
        warn_unknown(js, {"seed", "train_fraction", "val_fraction"}, "split.",
                     out.warnings);
    }
    if (!j.contains("split") || !j.at("split").contains("seed")) c.split.seed = c.seed;

    if (j.contains("models")) {
        const json& jm = j.at("models");
        if (!jm.is_array()) throw std::runtime_error("models must be an array");
        const auto known = keys_of(json(models::ModelConfig{}));
        std::size_t i = 0;
        for (const json& one : jm) {
            c.model_configs.push_back(one.get<models::ModelConfig>());
            warn_unknown(one, known, "models[" + std::to_string(i) + "].", out.warnings);
            ++i;
        }
    }

    if (j.contains("experiments")) {
        const json& je = j.at("experiments");
        if (je.contains("tasks")) {
            c.experiments.tasks.clear();
            for (const json& t : je.at("tasks"))
                c.experiments.tasks.push_back(parse_task(t.get<std::string>()));
        }
        if (je.contains("seeds"))
            c.experiments.seeds = je.at("seeds").get<std::vector<std::uint64_t>>();
        if (je.contains("sweep_sizes"))
            c.experiments.sweep_sizes =
                je.at("sweep_sizes").get<std::vector<std::size_t>>();
        c.experiments.ablation = je.value("ablation", c.experiments.ablation);
        c.experiments.use_pretrained =
            je.value("use_pretrained", c.experiments.use_pretrained);
        warn_unknown(je, {"tasks", "seeds", "sweep_sizes", "ablation", "use_pretrained"},
                     "experiments.", out.warnings);
    }

    warn_unknown(j, {"seed", "out_dir", "inputs", "gen", "rules", "corpus", "split",
                     "models", "experiments"},
                 "", out.warnings);
    return out;
}

LoadResult load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config '" + path + "' is not valid JSON: " + e.what());
    }
    return parse(j);
}

json echo(const RunConfig& c) {
    json je;
    je["tasks"] = json::array();
    for (auto t : c.experiments.tasks) je["tasks"].push_back(corpus::to_string(t));
    je["seeds"] = c.experiments.seeds;
    je["sweep_sizes"] = c.experiments.sweep_sizes;
    je["ablation"] = c.experiments.ablation;
    je["use_pretrained"] = c.experiments.use_pretrained;

    return json{
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"inputs",
         {{"events_csv", c.inputs.events_csv}, {"labels_csv", c.inputs.labels_csv}}},
        {"gen", c.gen},
        {"rules", c.effective_rules()},
        {"corpus",
         {{"max_len", c.corpus_settings.max_len},
          {"min_frequency", c.corpus_settings.min_frequency},
          {"modalities", c.corpus_settings.modalities.slug()},
          {"detection_horizon_days", c.corpus_settings.detection_horizon_days}}},
        {"split",
         {{"seed", c.split.seed},
          {"train_fraction", c.split.train_fraction},
          {"val_fraction", c.split.val_fraction}}},
        {"models", c.model_configs},
        {"experiments", je}};
}

std::vector<std::string> RunConfig::validate() const {
    std::vector<std::string> v;

    if (out_dir.empty()) v.push_back("out_dir: must not be empty");

    for (const auto& e : gen.validate()) v.push_back("gen: " + e);

    const std::string rules_err = effective_rules().validate();
    if (!rules_err.empty()) v.push_back("rules: " + rules_err);

    if (corpus_settings.max_len < 1)
        v.push_back("corpus: max_len must be at least 1, got " +
                    std::to_string(corpus_settings.max_len));
    if (corpus_settings.min_frequency < 1)
        v.push_back("corpus: min_frequency must be at least 1, got " +
                    std::to_string(corpus_settings.min_frequency));
    if (!corpus_settings.modalities.any())
        v.push_back("corpus: at least one modality must be enabled");
    if (corpus_settings.detection_horizon_days < 1)
        v.push_back("corpus: detection_horizon_days must be at least 1, got " +
                    std::to_string(corpus_settings.detection_horizon_days));

    if (!(split.train_fraction > 0.0 && split.train_fraction < 1.0))
        v.push_back("split: train_fraction must be in (0, 1), got " +
                    std::to_string(split.train_fraction));
    if (!(split.val_fraction >= 0.0 && split.val_fraction < 1.0))
        v.push_back("split: val_fraction must be in [0, 1), got " +
                    std::to_string(split.val_fraction));

    if (model_configs.empty()) v.push_back("models: at least one model is required");
    for (std::size_t i = 0; i < model_configs.size(); ++i) {
        const auto& m = model_configs[i];
        const std::string where = "models[" + std::to_string(i) + "]: ";
        for (const auto& e : m.validate()) v.push_back(where + e);
        if (m.kind == models::Kind::transformer &&
            m.max_positions < corpus_settings.max_len + 1)
            v.push_back(where + "max_positions (" + std::to_string(m.max_positions) +
                        ") must cover max_len + 1 = " +
                        std::to_string(corpus_settings.max_len + 1) +
                        " (CLS slot included)");
    }

    if (experiments.tasks.empty()) v.push_back("experiments: tasks must not be empty");
    for (auto t : experiments.tasks)
        if (t == corpus::Task::pretrain)
            v.push_back("experiments: pretrain is not an evaluation task");
    for (std::size_t i = 1; i < experiments.tasks.size(); ++i)
        for (std::size_t k = 0; k < i; ++k)
            if (experiments.tasks[i] == experiments.tasks[k])
                v.push_back(std::string("experiments: duplicate task '") +
                            corpus::to_string(experiments.tasks[i]) + "'");
    if (experiments.seeds.empty()) v.push_back("experiments: seeds must not be empty");
    for (std::size_t s : experiments.sweep_sizes)
        if (s == 0) v.push_back("experiments: sweep_sizes entries must be positive");

    namespace fs = std::filesystem;
    if (!inputs.events_csv.empty() && !fs::exists(inputs.events_csv))
        v.push_back("inputs: events_csv '" + inputs.events_csv + "' does not exist");
    if (!inputs.labels_csv.empty() && !fs::exists(inputs.labels_csv))
        v.push_back("inputs: labels_csv '" + inputs.labels_csv + "' does not exist");

    return v;
}

void apply_override(json& config, const std::string& dotted_path,
                    const std::string& value) {
    if (dotted_path.empty()) throw std::runtime_error("override: empty field path");

    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (pos <= dotted_path.size()) {
        const std::size_t dot = dotted_path.find('.', pos);
        parts.push_back(dotted_path.substr(pos, dot - pos));
        if (dot == std::string::npos) break;
        pos = dot + 1;
    }
    for (const auto& p : parts)
        if (p.empty())
            throw std::runtime_error("override: malformed field path '" + dotted_path +
                                     "'");

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::parse_error&) {
        parsed = value;  // bare strings stay strings
    }

    json* node = &config;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        const std::string& p = parts[i];
        const bool numeric = std::all_of(p.begin(), p.end(),
                                         [](unsigned char ch) { return std::isdigit(ch); });
        if (node->is_array()) {
            if (!numeric)
                throw std::runtime_error("override: '" + p + "' in '" + dotted_path +
                                         "' must be an array index");
            const std::size_t idx = std::stoul(p);
            if (idx >= node->size())
                throw std::runtime_error("override: index " + p + " in '" + dotted_path +
                                         "' is out of range (size " +
                                         std::to_string(node->size()) + ")");
            node = &(*node)[idx];
        } else {
            node = &(*node)[p];
        }
    }

    const std::string& last = parts.back();
    if (node->is_array()) {
        if (!std::all_of(last.begin(), last.end(),
                         [](unsigned char ch) { return std::isdigit(ch); }))
            throw std::runtime_error("override: '" + last + "' in '" + dotted_path +
                                     "' must be an array index");
        const std::size_t idx = std::stoul(last);
        if (idx >= node->size())
            throw std::runtime_error("override: index " + last + " in '" + dotted_path +
                                     "' is out of range (size " +
                                     std::to_string(node->size()) + ")");
        (*node)[idx] = parsed;
    } else {
        (*node)[last] = parsed;
    }
}

std::optional<std::uint64_t> env_seed() {
    const char* raw = std::getenv("EHRSEQ_SEED");
    if (raw == nullptr || *raw == '\0') return std::nullopt;
    char* end = nullptr;
    errno = 0;
    const unsigned long long parsed = std::strtoull(raw, &end, 10);
    if (errno != 0 || end == raw || *end != '\0')
        throw std::runtime_error(std::string("EHRSEQ_SEED is not a valid seed: '") + raw +
                                 "'");
    return std::uint64_t(parsed);
}

}  // namespace ehrseq::runconfig
