// ehrseq — pipeline front end. One JSON config drives every stage; each
// stage reads its inputs from disk, writes its declared outputs plus a
// manifest, logs to stderr and prints a single JSON status line on stdout.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/corpus.hpp"
#include "ehrseq/evalkit.hpp"
#include "ehrseq/events.hpp"
#include "ehrseq/models.hpp"
#include "ehrseq/runconfig.hpp"
#include "ehrseq/syngen.hpp"

#include <CLI11.hpp>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ehrseq;

namespace {

// Exit codes: 0 ok, 1 internal, 2 config, 3 io, 4 data.
enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kIo = 3, kData = 4 };

const char* category_name(ExitCode c) {
    switch (c) {
        case kOk: return "ok";
        case kConfig: return "config";
        case kIo: return "io";
        case kData: return "data";
        default: return "internal";
    }
}

struct CliError : std::runtime_error {
    ExitCode code;
    CliError(ExitCode c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void log_line(const std::string& stage, const std::string& msg) {
    std::cerr << "[" << stage << "] " << msg << "\n";
}

struct Ctx {
    runconfig::RunConfig cfg;
    json config_echo;

    fs::path out() const { return cfg.out_dir; }
    fs::path data_dir() const { return out() / "data"; }
    fs::path corpus_dir() const { return out() / "corpus"; }
    fs::path models_dir() const { return out() / "models"; }
    fs::path reports_dir() const { return out() / "reports"; }

    fs::path events_path() const {
        return cfg.inputs.events_csv.empty() ? data_dir() / "events.csv"
                                             : fs::path(cfg.inputs.events_csv);
    }
    fs::path labels_path() const {
        return cfg.inputs.labels_csv.empty() ? data_dir() / "labels.csv"
                                             : fs::path(cfg.inputs.labels_csv);
    }
};

void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CliError(kIo, "cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << '\n';
}

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CliError(kIo, "cannot open '" + path.string() + "'");
    return json::parse(in);
}

json digest_map(const std::vector<fs::path>& files) {
    json out = json::object();
    for (const auto& f : files) out[f.filename().string()] = evalkit::file_digest(f.string());
    return out;
}

void write_stage_manifest(const fs::path& path, const Ctx& ctx, const std::string& stage,
                          json inputs, json outputs) {
    write_json_file(path, json{{"stage", stage},
                               {"config", ctx.config_echo},
                               {"inputs", std::move(inputs)},
                               {"outputs", std::move(outputs)}});
}

// --- input loading -----------------------------------------------------------

std::vector<events::PatientStream> load_streams(const Ctx& ctx, const std::string& stage) {
    const fs::path p = ctx.events_path();
    if (!fs::exists(p))
        throw CliError(kIo, "events file '" + p.string() +
                                "' not found — run `ehrseq generate` first or point "
                                "inputs.events_csv at an existing file");
    auto r = events::ingest(p.string(), events::FileFormat::csv);
    if (!r.rejected.empty())
        log_line(stage, std::to_string(r.rejected.size()) + " malformed rows rejected (of " +
                            std::to_string(r.rows_seen) + ")");
    if (r.streams.empty())
        throw CliError(kData, "no valid events in '" + p.string() + "'");
    return std::move(r.streams);
}

std::vector<cohort::CohortLabel> load_labels(const Ctx& ctx) {
    const fs::path p = ctx.labels_path();
    if (!fs::exists(p))
        throw CliError(kIo, "labels file '" + p.string() +
                                "' not found — run `ehrseq annotate` first or point "
                                "inputs.labels_csv at an existing file");
    return cohort::read_labels_csv(p.string());
}

struct TaskCorpus {
    corpus::Vocabulary vocab;
    std::vector<corpus::CodeSequence> sequences;  // labeled
    fs::path vocab_file, sequences_file;
};

fs::path task_dir(const Ctx& ctx, corpus::Task task) {
    return ctx.corpus_dir() / corpus::to_string(task);
}

TaskCorpus load_corpus(const Ctx& ctx, corpus::Task task) {
    TaskCorpus tc;
    tc.vocab_file = task_dir(ctx, task) / "vocab.json";
    tc.sequences_file = task_dir(ctx, task) / "sequences.jsonl";
    if (!fs::exists(tc.vocab_file) || !fs::exists(tc.sequences_file))
        throw CliError(kIo, "corpus for task '" + std::string(corpus::to_string(task)) +
                                "' not found under '" + task_dir(ctx, task).string() +
                                "' — run `ehrseq build-corpus` first");
    tc.vocab = corpus::Vocabulary::load(tc.vocab_file.string());
    tc.sequences = corpus::read_sequences(tc.sequences_file.string());
    if (tc.sequences.empty())
        throw CliError(kData, "corpus '" + tc.sequences_file.string() + "' is empty");
    return tc;
}

bool any_transformer(const std::vector<models::ModelConfig>& configs) {
    for (const auto& m : configs)
        if (m.kind == models::Kind::transformer) return true;
    return false;
}

fs::path pretrained_path(const Ctx& ctx, corpus::Task task) {
    return ctx.models_dir() / ("pretrained_" + std::string(corpus::to_string(task)) +
                               ".ckpt");
}

// Loads the pre-trained encoder when the config asks for one; hard error if
// it is missing, so a misconfigured run cannot silently fall back.
std::optional<models::TrainedModel> maybe_pretrained(const Ctx& ctx, corpus::Task task) {
    if (!ctx.cfg.experiments.use_pretrained || !any_transformer(ctx.cfg.model_configs))
        return std::nullopt;
    const fs::path p = pretrained_path(ctx, task);
    if (!fs::exists(p))
        throw CliError(kIo, "pretrained encoder '" + p.string() +
                                "' not found — run `ehrseq pretrain` first or set "
                                "experiments.use_pretrained to false");
    return models::load_model(p.string());
}

corpus::EncodeOptions encode_options(const Ctx& ctx) {
    corpus::EncodeOptions opt;
    opt.modalities = ctx.cfg.corpus_settings.modalities;
    opt.max_len = ctx.cfg.corpus_settings.max_len;
    opt.detection_horizon_days = ctx.cfg.corpus_settings.detection_horizon_days;
    return opt;
}

// --- stages ------------------------------------------------------------------

json stage_generate(const Ctx& ctx) {
    fs::create_directories(ctx.data_dir());
    log_line("generate", "generating " + std::to_string(ctx.cfg.gen.n_patients) +
                             " patients (seed " + std::to_string(ctx.cfg.gen.seed) + ")");
    auto result = syngen::generate(ctx.cfg.gen);

    const fs::path events_file = ctx.data_dir() / "events.csv";
    const fs::path truth_file = ctx.data_dir() / "ground_truth.csv";
    events::emit(result.streams, events_file.string(), events::FileFormat::csv);
    syngen::write_ground_truth(result.ground_truth, truth_file.string());

    std::size_t n_events = 0;
    for (const auto& s : result.streams) n_events += s.events.size();
    log_line("generate", std::to_string(result.streams.size()) + " patients, " +
                             std::to_string(n_events) + " events");

    json outputs = digest_map({events_file, truth_file});
    write_json_file(ctx.data_dir() / "gen_manifest.json",
                    json{{"stage", "generate"},
                         {"config", ctx.config_echo},
                         {"describe", syngen::describe(ctx.cfg.gen)},
                         {"outputs", outputs}});
    return json{{"events", events_file.string()},
                {"ground_truth", truth_file.string()},
                {"n_patients", result.streams.size()},
                {"n_events", n_events}};
}

json stage_annotate(const Ctx& ctx) {
    fs::create_directories(ctx.data_dir());
    auto streams = load_streams(ctx, "annotate");
    const auto rules = ctx.cfg.effective_rules();
    auto result = cohort::annotate_all(streams, rules);
    const auto& s = result.summary;
    log_line("annotate", std::to_string(s.n_case) + " cases, " +
                             std::to_string(s.n_control) + " controls, " +
                             std::to_string(s.n_excluded) + " excluded, " +
                             std::to_string(s.n_not_in_cohort) + " not in cohort");
    if (s.n_case == 0 || s.n_control == 0)
        throw CliError(kData, "degenerate cohort: " + std::to_string(s.n_case) +
                                  " cases / " + std::to_string(s.n_control) +
                                  " controls — labeling needs both classes");

    const fs::path labels_file = ctx.data_dir() / "labels.csv";
    cohort::write_labels_csv(result.labels, labels_file.string());
    const json summary{{"n_case", s.n_case},
                       {"n_control", s.n_control},
                       {"n_excluded", s.n_excluded},
                       {"n_not_in_cohort", s.n_not_in_cohort},
                       {"n_excluded_early", s.n_excluded_early},
                       {"n_excluded_inconsistent", s.n_excluded_inconsistent}};
    write_json_file(ctx.data_dir() / "cohort_summary.json", summary);

    write_stage_manifest(ctx.data_dir() / "annotate_manifest.json", ctx, "annotate",
                         digest_map({ctx.events_path()}),
                         digest_map({labels_file, ctx.data_dir() / "cohort_summary.json"}));
    return json{{"labels", labels_file.string()}, {"summary", summary}};
}

json stage_build_corpus(const Ctx& ctx) {
    auto streams = load_streams(ctx, "build-corpus");
    auto labels = load_labels(ctx);
    std::unordered_map<std::string, const cohort::CohortLabel*> by_id;
    for (const auto& l : labels) by_id[l.patient_id] = &l;

    const auto opt = encode_options(ctx);
    json outputs = json::object();
    json status = json::object();
    std::size_t unknown = 0;

    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        const char* name = corpus::to_string(task);
        const fs::path dir = task_dir(ctx, task);
        fs::create_directories(dir);

        // vocabulary from the labeled patients' task-windowed streams only
        std::vector<events::PatientStream> windowed;
        std::vector<std::pair<const events::PatientStream*, const cohort::CohortLabel*>>
            labeled;
        std::vector<const events::PatientStream*> unlabeled;
        for (const auto& stream : streams) {
            auto it = by_id.find(stream.patient_id);
            if (it == by_id.end()) {
                ++unknown;
                continue;  // no label row: keep the patient away from every corpus
            }
            switch (it->second->status) {
                case cohort::Status::case_:
                case cohort::Status::control:
                    labeled.emplace_back(&stream, it->second);
                    windowed.push_back(corpus::window(stream, *it->second, task,
                                                      opt.detection_horizon_days));
                    break;
                case cohort::Status::not_in_cohort:
                    unlabeled.push_back(&stream);
                    break;
                case cohort::Status::excluded:
                    break;  // never reaches any model input
            }
        }
        if (labeled.empty())
            throw CliError(kData, std::string("no labeled patients for task '") + name +
                                      "'");

        const auto vocab = corpus::build_vocab(windowed, opt.modalities,
                                               ctx.cfg.corpus_settings.min_frequency);

        std::vector<corpus::CodeSequence> sequences;
        sequences.reserve(labeled.size());
        for (const auto& [stream, label] : labeled)
            sequences.push_back(corpus::encode(*stream, *label, task, vocab, opt));

        std::vector<corpus::CodeSequence> pretrain_seqs;
        pretrain_seqs.reserve(unlabeled.size());
        for (const auto* stream : unlabeled)
            pretrain_seqs.push_back(corpus::encode_unlabeled(*stream, vocab, opt));

        const fs::path vocab_file = dir / "vocab.json";
        const fs::path seq_file = dir / "sequences.jsonl";
        const fs::path pre_file = dir / "pretrain.jsonl";
        vocab.save(vocab_file.string());
        corpus::write_sequences(sequences, seq_file.string());
        corpus::write_sequences(pretrain_seqs, pre_file.string());

        log_line("build-corpus", std::string(name) + ": vocab " +
                                     std::to_string(vocab.size()) + ", " +
                                     std::to_string(sequences.size()) + " labeled, " +
                                     std::to_string(pretrain_seqs.size()) + " unlabeled");
        outputs[name] = digest_map({vocab_file, seq_file, pre_file});
        status[name] = json{{"vocab_size", vocab.size()},
                            {"labeled", sequences.size()},
                            {"unlabeled", pretrain_seqs.size()}};
    }
    if (unknown > 0)
        log_line("build-corpus", std::to_string(unknown) +
                                     " patients had no label row and were dropped");

    write_stage_manifest(ctx.corpus_dir() / "manifest.json", ctx, "build-corpus",
                         digest_map({ctx.events_path(), ctx.labels_path()}),
                         std::move(outputs));
    return status;
}

json stage_pretrain(const Ctx& ctx) {
    const models::ModelConfig* tcfg = nullptr;
    for (const auto& m : ctx.cfg.model_configs)
        if (m.kind == models::Kind::transformer) {
            tcfg = &m;
            break;
        }
    if (tcfg == nullptr)
        throw CliError(kConfig, "pretrain needs a transformer entry in models");

    fs::create_directories(ctx.models_dir());
    json status = json::object();
    json outputs = json::object();
    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        const char* name = corpus::to_string(task);
        const fs::path dir = task_dir(ctx, task);
        const fs::path pre_file = dir / "pretrain.jsonl";
        const fs::path vocab_file = dir / "vocab.json";
        if (!fs::exists(pre_file) || !fs::exists(vocab_file))
            throw CliError(kIo, std::string("pretraining corpus for '") + name +
                                    "' not found — run `ehrseq build-corpus` first");
        const auto vocab = corpus::Vocabulary::load(vocab_file.string());
        const auto seqs = corpus::read_sequences(pre_file.string());
        std::vector<const corpus::CodeSequence*> ptrs;
        for (const auto& s : seqs) ptrs.push_back(&s);

        models::ModelConfig cfg = *tcfg;
        cfg.seed = ctx.cfg.seed;
        log_line("pretrain", std::string(name) + ": " + std::to_string(ptrs.size()) +
                                 " unlabeled sequences, " +
                                 std::to_string(cfg.pretrain_epochs) + " epochs");
        auto model = models::pretrain_transformer(ptrs, cfg, vocab.size(), vocab.hash());
        const fs::path out_file = pretrained_path(ctx, task);
        models::save_model(model, out_file.string());
        log_line("pretrain", std::string(name) + ": final masked accuracy " +
                                 std::to_string(model.meta.mlm_accuracy.back()));
        status[name] = json{{"file", out_file.string()},
                            {"epochs_run", model.meta.epochs_run},
                            {"mlm_accuracy", model.meta.mlm_accuracy}};
        outputs[name] = digest_map({out_file});
    }
    write_stage_manifest(ctx.models_dir() / "pretrain_manifest.json", ctx, "pretrain",
                         json::object(), std::move(outputs));
    return status;
}

json stage_train(const Ctx& ctx) {
    fs::create_directories(ctx.models_dir());
    json status = json::array();
    json outputs = json::object();
    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        const char* name = corpus::to_string(task);
        const auto tc = load_corpus(ctx, task);
        const auto sp = corpus::split(tc.sequences, ctx.cfg.split);
        auto pretrained = maybe_pretrained(ctx, task);

        std::vector<const corpus::CodeSequence*> train_ptrs, val_ptrs;
        for (std::size_t i : sp.train) train_ptrs.push_back(&tc.sequences[i]);
        for (std::size_t i : sp.val) val_ptrs.push_back(&tc.sequences[i]);

        corpus::BowMatrix bow;
        std::vector<int> bow_labels;
        if (std::any_of(ctx.cfg.model_configs.begin(), ctx.cfg.model_configs.end(),
                        [](const models::ModelConfig& m) {
                            return m.kind == models::Kind::lr || m.kind == models::Kind::rf;
                        })) {
            // baselines have no early stopping: train and val rows both fit
            std::vector<corpus::CodeSequence> fit;
            for (std::size_t i : sp.train) fit.push_back(tc.sequences[i]);
            for (std::size_t i : sp.val) fit.push_back(tc.sequences[i]);
            bow = corpus::bag_of_words(fit, tc.vocab);
            for (const auto& s : fit) bow_labels.push_back(s.label);
        }

        for (const auto& base : ctx.cfg.model_configs) {
            for (std::uint64_t seed : ctx.cfg.experiments.seeds) {
                models::ModelConfig cfg = base;
                cfg.seed = seed;
                models::TrainedModel model;
                switch (cfg.kind) {
                    case models::Kind::lr:
                        model = models::train_lr(bow, bow_labels, cfg, tc.vocab.hash());
                        break;
                    case models::Kind::rf:
                        model = models::train_rf(bow, bow_labels, cfg, tc.vocab.hash());
                        break;
                    case models::Kind::gru:
                    case models::Kind::lstm:
                        model = models::train_recurrent(train_ptrs, val_ptrs, cfg,
                                                        tc.vocab.size(), tc.vocab.hash());
                        break;
                    case models::Kind::transformer:
                        model = models::finetune_transformer(
                            pretrained ? &*pretrained : nullptr, train_ptrs, val_ptrs,
                            cfg, tc.vocab.size(), tc.vocab.hash());
                        break;
                }
                const std::string file_name = std::string(name) + "_" +
                                              models::to_string(cfg.kind) + "_s" +
                                              std::to_string(seed) + ".model";
                const fs::path out_file = ctx.models_dir() / file_name;
                models::save_model(model, out_file.string());
                log_line("train", file_name + " (best val AUC " +
                                      std::to_string(model.meta.best_val_auc) + ")");
                outputs[file_name] = evalkit::file_digest(out_file.string());
                status.push_back(json{{"file", out_file.string()},
                                      {"task", name},
                                      {"model", models::to_string(cfg.kind)},
                                      {"seed", seed},
                                      {"epochs_run", model.meta.epochs_run},
                                      {"best_val_auc", model.meta.best_val_auc}});
            }
        }
    }
    write_stage_manifest(ctx.models_dir() / "train_manifest.json", ctx, "train",
                         json::object(), std::move(outputs));
    return status;
}

json render_reports(const Ctx& ctx, const std::string& stage,
                    const std::vector<evalkit::RocReport>& reports, json inputs) {
    const fs::path dir = ctx.reports_dir() / stage;
    fs::create_directories(dir);
    write_json_file(dir / "reports.json", json(reports));
    evalkit::report(reports, dir.string(),
                    json{{"stage", stage},
                         {"config", ctx.config_echo},
                         {"inputs", std::move(inputs)}});
    log_line(stage, std::to_string(reports.size()) + " reports rendered into " +
                        dir.string());
    json aucs = json::object();
    for (const auto& r : reports) aucs[r.desc.id()] = r.auc;
    return json{{"dir", dir.string()}, {"n_reports", reports.size()}, {"auc", aucs}};
}

json stage_evaluate(const Ctx& ctx) {
    std::vector<evalkit::RocReport> reports;
    json inputs = json::object();
    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        const auto tc = load_corpus(ctx, task);
        auto pretrained = maybe_pretrained(ctx, task);
        evalkit::EncodedTask data{task, ctx.cfg.corpus_settings.modalities, tc.vocab,
                                  tc.sequences};
        auto r = evalkit::run_task(data, ctx.cfg.model_configs, ctx.cfg.split,
                                   ctx.cfg.experiments.seeds,
                                   pretrained ? &*pretrained : nullptr);
        reports.insert(reports.end(), r.begin(), r.end());
        inputs[corpus::to_string(task)] = digest_map({tc.vocab_file, tc.sequences_file});
    }
    return render_reports(ctx, "evaluate", reports, std::move(inputs));
}

json stage_sweep(const Ctx& ctx) {
    if (ctx.cfg.experiments.sweep_sizes.empty())
        throw CliError(kConfig, "sweep requires experiments.sweep_sizes");
    std::vector<evalkit::RocReport> reports;
    json inputs = json::object();
    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        const auto tc = load_corpus(ctx, task);
        auto pretrained = maybe_pretrained(ctx, task);
        evalkit::EncodedTask data{task, ctx.cfg.corpus_settings.modalities, tc.vocab,
                                  tc.sequences};
        auto r = evalkit::size_sweep(data, ctx.cfg.model_configs,
                                     ctx.cfg.experiments.sweep_sizes, ctx.cfg.split,
                                     ctx.cfg.experiments.seeds,
                                     pretrained ? &*pretrained : nullptr);
        reports.insert(reports.end(), r.begin(), r.end());
        inputs[corpus::to_string(task)] = digest_map({tc.vocab_file, tc.sequences_file});
    }
    return render_reports(ctx, "sweep", reports, std::move(inputs));
}

json stage_ablate(const Ctx& ctx) {
    auto streams = load_streams(ctx, "ablate");
    auto labels = load_labels(ctx);
    std::vector<evalkit::RocReport> reports;
    for (corpus::Task task : ctx.cfg.experiments.tasks) {
        evalkit::AblationInput input;
        input.streams = &streams;
        input.labels = &labels;
        input.task = task;
        input.max_len = ctx.cfg.corpus_settings.max_len;
        input.detection_horizon_days = ctx.cfg.corpus_settings.detection_horizon_days;
        input.min_frequency = ctx.cfg.corpus_settings.min_frequency;
        auto r = evalkit::ablation(input, ctx.cfg.model_configs,
                                   evalkit::all_modality_subsets(), ctx.cfg.split,
                                   ctx.cfg.experiments.seeds);
        reports.insert(reports.end(), r.begin(), r.end());
    }
    return render_reports(ctx, "ablation", reports,
                          digest_map({ctx.events_path(), ctx.labels_path()}));
}

json stage_report(const Ctx& ctx) {
    json rendered = json::object();
    for (const char* stage : {"evaluate", "sweep", "ablation"}) {
        const fs::path raw = ctx.reports_dir() / stage / "reports.json";
        if (!fs::exists(raw)) continue;
        auto reports = read_json_file(raw).get<std::vector<evalkit::RocReport>>();
        evalkit::report(reports, (ctx.reports_dir() / stage).string(),
                        json{{"stage", stage}, {"config", ctx.config_echo}});
        rendered[stage] = reports.size();
        log_line("report", std::string(stage) + ": re-rendered " +
                               std::to_string(reports.size()) + " reports");
    }
    if (rendered.empty())
        throw CliError(kData, "no reports.json found under '" +
                                  ctx.reports_dir().string() +
                                  "' — run evaluate, sweep or ablate first");
    return rendered;
}

json stage_all(const Ctx& ctx) {
    json status;
    status["generate"] = stage_generate(ctx);
    status["annotate"] = stage_annotate(ctx);
    status["build_corpus"] = stage_build_corpus(ctx);
    if (ctx.cfg.experiments.use_pretrained && any_transformer(ctx.cfg.model_configs))
        status["pretrain"] = stage_pretrain(ctx);
    status["train"] = stage_train(ctx);
    status["evaluate"] = stage_evaluate(ctx);
    if (!ctx.cfg.experiments.sweep_sizes.empty()) status["sweep"] = stage_sweep(ctx);
    if (ctx.cfg.experiments.ablation) status["ablate"] = stage_ablate(ctx);
    return status;
}

// --- config & flag plumbing ----------------------------------------------------

// Turns leftover `--a.b.c value` / `--a.b.c=value` tokens into overrides.
std::vector<std::pair<std::string, std::string>> parse_extras(
    const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> out;
    for (std::size_t i = 0; i < extras.size(); ++i) {
        const std::string& tok = extras[i];
        if (tok.rfind("--", 0) != 0)
            throw CliError(kConfig, "unexpected argument '" + tok + "'");
        std::string body = tok.substr(2);
        const std::size_t eq = body.find('=');
        if (eq != std::string::npos) {
            out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
        } else {
            if (i + 1 >= extras.size())
                throw CliError(kConfig, "flag '--" + body + "' is missing a value");
            out.emplace_back(body, extras[++i]);
        }
    }
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::string seed_flag;
};

int run(int argc, char** argv) {
    CLI::App app{"ehrseq — treatment-failure detection and prediction on coded "
                 "event sequences"};
    app.require_subcommand(1);

    struct Sub {
        CLI::App* app = nullptr;
        CommonFlags flags;
    };
    std::map<std::string, Sub> subs;
    const std::vector<std::pair<std::string, std::string>> sub_defs = {
        {"generate", "synthesize the event corpus and ground truth"},
        {"annotate", "label patients with the cohort rules"},
        {"build-corpus", "tokenize labeled and unlabeled patients per task"},
        {"pretrain", "masked-code pretraining of the transformer encoder"},
        {"train", "train every configured model and save checkpoints"},
        {"evaluate", "frozen-test evaluation of every configured model"},
        {"sweep", "training-set size sweep"},
        {"ablate", "modality ablation grid"},
        {"report", "re-render report files from stored results"},
        {"all", "run the whole pipeline"},
        {"validate", "check the config and print violations as data"}};
    for (const auto& [name, desc] : sub_defs) {
        Sub& s = subs[name];
        s.app = app.add_subcommand(name, desc);
        s.app->allow_extras();
        s.app->add_option("--config", s.flags.config_path, "run config JSON")->required();
        s.app->add_option("--seed", s.flags.seed_flag,
                          "global seed override (beats EHRSEQ_SEED and the config)");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << e.what() << "\n";
        std::cout << json{{"status", "error"},
                          {"category", "config"},
                          {"message", e.what()}}
                         .dump()
                  << "\n";
        return kConfig;
    }

    CLI::App* picked = app.get_subcommands().front();
    const std::string command = picked->get_name();
    const Sub& sub = subs.at(command);

    try {
        // config file -> dotted overrides -> env/flag seed -> parse
        json raw;
        {
            std::ifstream in(sub.flags.config_path);
            if (!in)
                throw CliError(kConfig, "cannot open config file '" +
                                            sub.flags.config_path + "'");
            try {
                raw = json::parse(in);
            } catch (const json::parse_error& e) {
                throw CliError(kConfig, "config '" + sub.flags.config_path +
                                            "' is not valid JSON: " + e.what());
            }
        }
        runconfig::LoadResult loaded;
        try {
            for (const auto& [key, value] : parse_extras(picked->remaining()))
                runconfig::apply_override(raw, key, value);
            if (!sub.flags.seed_flag.empty()) {
                runconfig::apply_override(raw, "seed", sub.flags.seed_flag);
            } else if (auto env = runconfig::env_seed()) {
                runconfig::apply_override(raw, "seed", std::to_string(*env));
            }
            loaded = runconfig::parse(raw);
        } catch (const CliError&) {
            throw;
        } catch (const std::exception& e) {
            throw CliError(kConfig, e.what());
        }
        for (const auto& w : loaded.warnings) log_line("config", "warning: " + w);

        Ctx ctx{loaded.config, runconfig::echo(loaded.config)};
        const auto violations = ctx.cfg.validate();

        if (command == "validate") {
            std::cout << json{{"status", "ok"},
                              {"command", command},
                              {"violations", violations},
                              {"warnings", loaded.warnings}}
                             .dump()
                      << "\n";
            return kOk;
        }
        if (!violations.empty()) {
            for (const auto& v : violations) log_line("config", "violation: " + v);
            throw CliError(kConfig, "config has " + std::to_string(violations.size()) +
                                        " violation(s); run `ehrseq validate` for the "
                                        "full list");
        }

        fs::create_directories(ctx.out());
        json outputs;
        if (command == "generate") outputs = stage_generate(ctx);
        else if (command == "annotate") outputs = stage_annotate(ctx);
        else if (command == "build-corpus") outputs = stage_build_corpus(ctx);
        else if (command == "pretrain") outputs = stage_pretrain(ctx);
        else if (command == "train") outputs = stage_train(ctx);
        else if (command == "evaluate") outputs = stage_evaluate(ctx);
        else if (command == "sweep") outputs = stage_sweep(ctx);
        else if (command == "ablate") outputs = stage_ablate(ctx);
        else if (command == "report") outputs = stage_report(ctx);
        else if (command == "all") outputs = stage_all(ctx);

        std::cout << json{{"status", "ok"},
                          {"command", command},
                          {"out_dir", ctx.cfg.out_dir},
                          {"outputs", outputs}}
                         .dump()
                  << "\n";
        return kOk;
    } catch (const CliError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cout << json{{"status", "error"},
                          {"command", command},
                          {"category", category_name(e.code)},
                          {"message", e.what()}}
                         .dump()
                  << "\n";
        return e.code;
    } catch (const std::runtime_error& e) {
        // library-level failures: bad data or state, message says what
        std::cerr << "error: " << e.what() << "\n";
        std::cout << json{{"status", "error"},
                          {"command", command},
                          {"category", "data"},
                          {"message", e.what()}}
                         .dump()
                  << "\n";
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        std::cout << json{{"status", "error"},
                          {"command", command},
                          {"category", "internal"},
                          {"message", e.what()}}
                         .dump()
                  << "\n";
        return kInternal;
    }
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
