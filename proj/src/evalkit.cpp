#include "ehrseq/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include "ehrseq/rng.hpp"

namespace ehrseq::evalkit {

using corpus::CodeSequence;
using nlohmann::json;

std::string Descriptor::id() const {
    return task + "_" + model + "_" + modalities + "_n" + std::to_string(train_size) +
           "_s" + std::to_string(seed);
}

void to_json(json& j, const Descriptor& d) {
    j = json{{"task", d.task},
             {"model", d.model},
             {"modalities", d.modalities},
             {"train_size", d.train_size},
             {"seed", d.seed}};
}

void from_json(const json& j, Descriptor& d) {
    j.at("task").get_to(d.task);
    j.at("model").get_to(d.model);
    j.at("modalities").get_to(d.modalities);
    j.at("train_size").get_to(d.train_size);
    j.at("seed").get_to(d.seed);
}

void to_json(json& j, const RocReport& r) {
    json points = json::array();
    for (const auto& [fpr, tpr] : r.points) points.push_back({fpr, tpr});
    j = json{{"desc", r.desc},       {"auc", r.auc},     {"n_pos", r.n_pos},
             {"n_neg", r.n_neg},     {"points", points}, {"test_hash", r.test_hash}};
}

void from_json(const json& j, RocReport& r) {
    j.at("desc").get_to(r.desc);
    j.at("auc").get_to(r.auc);
    j.at("n_pos").get_to(r.n_pos);
    j.at("n_neg").get_to(r.n_neg);
    j.at("test_hash").get_to(r.test_hash);
    r.points.clear();
    for (const auto& p : j.at("points"))
        r.points.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
}

RocReport roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::runtime_error("roc_auc: " + std::to_string(scores.size()) +
                                 " scores vs " + std::to_string(labels.size()) + " labels");
    RocReport r;
    for (int y : labels) {
        if (y == 1)
            ++r.n_pos;
        else if (y == 0)
            ++r.n_neg;
        else
            throw std::runtime_error("roc_auc: labels must be 0/1");
    }
    if (r.n_pos == 0 || r.n_neg == 0)
        throw std::runtime_error("roc_auc: need both classes (" + std::to_string(r.n_pos) +
                                 " positives, " + std::to_string(r.n_neg) + " negatives)");

    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b];
    });

    r.points.emplace_back(0.0, 0.0);
    double tp = 0, fp = 0, auc = 0, prev_fpr = 0, prev_tpr = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? tp : fp) += 1;
            ++j;
        }
        const double fpr = fp / double(r.n_neg);
        const double tpr = tp / double(r.n_pos);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        r.points.emplace_back(fpr, tpr);
        prev_fpr = fpr;
        prev_tpr = tpr;
        i = j;
    }
    r.auc = auc;
    return r;
}

namespace {

std::vector<const CodeSequence*> ptrs_at(const std::vector<CodeSequence>& seqs,
                                         const std::vector<std::size_t>& idx) {
    std::vector<const CodeSequence*> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(&seqs[i]);
    return out;
}

std::vector<int> labels_at(const std::vector<CodeSequence>& seqs,
                           const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(seqs[i].label);
    return out;
}

corpus::BowMatrix rows_of(const corpus::BowMatrix& m, const std::vector<std::size_t>& idx) {
    corpus::BowMatrix out;
    out.rows = idx.size();
    out.cols = m.cols;
    out.values.reserve(idx.size() * m.cols);
    for (std::size_t i : idx) {
        const auto* row = m.values.data() + i * m.cols;
        out.values.insert(out.values.end(), row, row + m.cols);
        out.patient_ids.push_back(m.patient_ids[i]);
    }
    return out;
}

bool needs_bow(const std::vector<models::ModelConfig>& configs) {
    return std::any_of(configs.begin(), configs.end(), [](const models::ModelConfig& c) {
        return c.kind == models::Kind::lr || c.kind == models::Kind::rf;
    });
}

// Trains `config` (seed already applied) on the given split portions and
// scores the test rows.
RocReport run_one(const EncodedTask& data, const corpus::BowMatrix* bow,
                  const models::ModelConfig& config,
                  const std::vector<std::size_t>& train_idx,
                  const std::vector<std::size_t>& val_idx,
                  const std::vector<std::size_t>& test_idx, const std::string& test_hash,
                  const models::TrainedModel* pretrained) {
    const std::vector<int> test_labels = labels_at(data.sequences, test_idx);
    std::vector<double> scores;

    switch (config.kind) {
        case models::Kind::lr:
        case models::Kind::rf: {
            // the baselines have no early stopping, so validation rows join
            // the fit
            std::vector<std::size_t> fit_idx;
            fit_idx.reserve(train_idx.size() + val_idx.size());
            std::merge(train_idx.begin(), train_idx.end(), val_idx.begin(), val_idx.end(),
                       std::back_inserter(fit_idx));
            corpus::BowMatrix fit = rows_of(*bow, fit_idx);
            corpus::BowMatrix test = rows_of(*bow, test_idx);
            const std::vector<int> fit_labels = labels_at(data.sequences, fit_idx);
            models::TrainedModel model =
                config.kind == models::Kind::lr
                    ? models::train_lr(fit, fit_labels, config, data.vocab.hash())
                    : models::train_rf(fit, fit_labels, config, data.vocab.hash());
            scores = models::score_bow(model, test);
            break;
        }
        case models::Kind::gru:
        case models::Kind::lstm: {
            models::TrainedModel model = models::train_recurrent(
                ptrs_at(data.sequences, train_idx), ptrs_at(data.sequences, val_idx),
                config, data.vocab.size(), data.vocab.hash());
            scores = models::score_sequences(model, ptrs_at(data.sequences, test_idx));
            break;
        }
        case models::Kind::transformer: {
            models::TrainedModel model = models::finetune_transformer(
                pretrained, ptrs_at(data.sequences, train_idx),
                ptrs_at(data.sequences, val_idx), config, data.vocab.size(),
                data.vocab.hash());
            scores = models::score_sequences(model, ptrs_at(data.sequences, test_idx));
            break;
        }
    }

    RocReport r = roc_auc(scores, test_labels);
    r.desc.task = corpus::to_string(data.task);
    r.desc.model = models::to_string(config.kind);
    r.desc.modalities = data.modalities.slug();
    r.desc.train_size = train_idx.size();
    r.desc.seed = config.seed;
    r.test_hash = test_hash;
    return r;
}

}  // namespace

std::vector<RocReport> run_task(const EncodedTask& data,
                                const std::vector<models::ModelConfig>& configs,
                                const corpus::SplitSpec& split_spec,
                                const std::vector<std::uint64_t>& seeds,
                                const models::TrainedModel* pretrained) {
    const corpus::Split sp = corpus::split(data.sequences, split_spec);
    corpus::BowMatrix bow;
    if (needs_bow(configs)) bow = corpus::bag_of_words(data.sequences, data.vocab);

    std::vector<RocReport> reports;
    for (const auto& base : configs) {
        for (std::uint64_t seed : seeds) {
            models::ModelConfig cfg = base;
            cfg.seed = seed;
            reports.push_back(run_one(data, &bow, cfg, sp.train, sp.val, sp.test,
                                      sp.test_hash, pretrained));
        }
    }
    return reports;
}

std::vector<RocReport> size_sweep(const EncodedTask& data,
                                  const std::vector<models::ModelConfig>& configs,
                                  const std::vector<std::size_t>& sizes,
                                  const corpus::SplitSpec& split_spec,
                                  const std::vector<std::uint64_t>& seeds,
                                  const models::TrainedModel* pretrained) {
    const corpus::Split sp = corpus::split(data.sequences, split_spec);
    corpus::BowMatrix bow;
    if (needs_bow(configs)) bow = corpus::bag_of_words(data.sequences, data.vocab);

    std::vector<RocReport> reports;
    for (const auto& base : configs) {
        for (std::uint64_t seed : seeds) {
            // rank the train pool once per seed; size-s subsample = first s
            // ranks, so subsamples nest across sizes
            std::vector<std::size_t> ranked = sp.train;
            std::sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
                const auto& pa = data.sequences[a].patient_id;
                const auto& pb = data.sequences[b].patient_id;
                const std::uint64_t ka = rng::mix64(seed ^ rng::fnv1a64(pa));
                const std::uint64_t kb = rng::mix64(seed ^ rng::fnv1a64(pb));
                return ka != kb ? ka < kb : pa < pb;
            });

            std::vector<std::size_t> done;
            for (std::size_t requested : sizes) {
                const std::size_t n = std::min(requested, sp.train.size());
                if (std::find(done.begin(), done.end(), n) != done.end()) continue;
                done.push_back(n);
                std::vector<std::size_t> sub(ranked.begin(),
                                             ranked.begin() + std::ptrdiff_t(n));
                std::sort(sub.begin(), sub.end());  // restore pool order
                models::ModelConfig cfg = base;
                cfg.seed = seed;
                reports.push_back(run_one(data, &bow, cfg, sub, sp.val, sp.test,
                                          sp.test_hash, pretrained));
            }
        }
    }
    return reports;
}

std::vector<corpus::Modalities> all_modality_subsets() {
    auto m = [](bool dx, bool px, bool rx) {
        corpus::Modalities s;
        s.diagnosis = dx;
        s.procedure = px;
        s.prescription = rx;
        return s;
    };
    return {m(true, false, false), m(false, true, false), m(false, false, true),
            m(true, true, false), m(true, false, true), m(false, true, true),
            m(true, true, true)};
}

std::vector<RocReport> ablation(const AblationInput& input,
                                const std::vector<models::ModelConfig>& configs,
                                const std::vector<corpus::Modalities>& subsets,
                                const corpus::SplitSpec& split_spec,
                                const std::vector<std::uint64_t>& seeds) {
    if (!input.streams || !input.labels)
        throw std::runtime_error("ablation: streams and labels are required");
    std::unordered_map<std::string, const events::PatientStream*> by_id;
    for (const auto& s : *input.streams) by_id[s.patient_id] = &s;

    std::vector<RocReport> reports;
    for (const auto& subset : subsets) {
        EncodedTask data;
        data.task = input.task;
        data.modalities = subset;
        data.vocab = corpus::build_vocab(*input.streams, subset, input.min_frequency);
        corpus::EncodeOptions opt;
        opt.modalities = subset;
        opt.max_len = input.max_len;
        opt.detection_horizon_days = input.detection_horizon_days;
        for (const auto& label : *input.labels) {
            if (label.status != cohort::Status::case_ &&
                label.status != cohort::Status::control)
                continue;
            auto it = by_id.find(label.patient_id);
            if (it == by_id.end())
                throw std::runtime_error("ablation: no event stream for patient '" +
                                         label.patient_id + "'");
            data.sequences.push_back(
                corpus::encode(*it->second, label, input.task, data.vocab, opt));
        }
        auto subset_reports = run_task(data, configs, split_spec, seeds);
        reports.insert(reports.end(), subset_reports.begin(), subset_reports.end());
    }
    return reports;
}

// --- report rendering -------------------------------------------------------

namespace {

std::string fmt(double v, const char* spec = "%.6f") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

// Aggregation key: everything but the seed.
struct GroupKey {
    std::string task, model, modalities;
    std::size_t train_size;
    auto operator<=>(const GroupKey&) const = default;
};

GroupKey key_of(const RocReport& r) {
    return {r.desc.task, r.desc.model, r.desc.modalities, r.desc.train_size};
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    out << content;
    if (!out) throw std::runtime_error("write failure on '" + path + "'");
}

std::string metrics_csv(const std::vector<RocReport>& reports) {
    std::string csv = "task,model,modalities,train_size,seed,auc,n_pos,n_neg,test_hash\n";
    auto row = [&](const RocReport& r, const std::string& seed, double auc) {
        csv += r.desc.task + "," + r.desc.model + "," + r.desc.modalities + "," +
               std::to_string(r.desc.train_size) + "," + seed + "," + fmt(auc) + "," +
               std::to_string(r.n_pos) + "," + std::to_string(r.n_neg) + "," +
               r.test_hash + "\n";
    };
    for (const auto& r : reports) row(r, std::to_string(r.desc.seed), r.auc);

    // per-group means over seeds, in first-appearance order
    std::vector<GroupKey> order;
    std::map<GroupKey, std::pair<double, std::vector<const RocReport*>>> groups;
    for (const auto& r : reports) {
        auto k = key_of(r);
        auto [it, fresh] = groups.try_emplace(k);
        if (fresh) order.push_back(k);
        it->second.first += r.auc;
        it->second.second.push_back(&r);
    }
    for (const auto& k : order) {
        const auto& [sum, members] = groups.at(k);
        row(*members.front(), "mean", sum / double(members.size()));
    }
    return csv;
}

std::string roc_csv(const RocReport& r) {
    std::string csv = "fpr,tpr\n";
    for (const auto& [fpr, tpr] : r.points) csv += fmt(fpr) + "," + fmt(tpr) + "\n";
    return csv;
}

// Minimal static SVG; no external assets, no timestamps.
struct SvgCanvas {
    static constexpr int kW = 480, kH = 480;
    static constexpr double kLeft = 56, kRight = 16, kTop = 36, kBottom = 48;
    std::string body;

    double px(double unit) const { return kLeft + unit * (kW - kLeft - kRight); }
    double py(double unit) const { return kH - kBottom - unit * (kH - kTop - kBottom); }

    void line(double x1, double y1, double x2, double y2, const char* style) {
        body += "<line x1=\"" + fmt(x1, "%.1f") + "\" y1=\"" + fmt(y1, "%.1f") +
                "\" x2=\"" + fmt(x2, "%.1f") + "\" y2=\"" + fmt(y2, "%.1f") + "\" " +
                style + "/>\n";
    }
    void text(double x, double y, const std::string& s, const std::string& extra = "") {
        body += "<text x=\"" + fmt(x, "%.1f") + "\" y=\"" + fmt(y, "%.1f") +
                "\" font-family=\"sans-serif\" font-size=\"12\" " + extra + ">" + s +
                "</text>\n";
    }
    void polyline(const std::vector<std::pair<double, double>>& pts, const char* style) {
        body += "<polyline fill=\"none\" ";
        body += style;
        body += " points=\"";
        for (const auto& [x, y] : pts)
            body += fmt(x, "%.1f") + "," + fmt(y, "%.1f") + " ";
        body += "\"/>\n";
    }
    void frame(const std::string& title, const std::string& xlabel,
               const std::string& ylabel) {
        line(px(0), py(0), px(1), py(0), "stroke=\"black\"");
        line(px(0), py(0), px(0), py(1), "stroke=\"black\"");
        text(kW / 2.0 - 4.0 * double(title.size()) / 2.0, 20, title);
        text(px(0.5) - 4.0 * double(xlabel.size()) / 2.0, kH - 12, xlabel);
        text(12, py(0.5),  ylabel,
             "transform=\"rotate(-90 12 " + fmt(py(0.5), "%.1f") + ")\"");
    }
    std::string render() const {
        return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kW) +
               "\" height=\"" + std::to_string(kH) + "\">\n" + body + "</svg>\n";
    }
};

std::string roc_svg(const RocReport& r) {
    SvgCanvas c;
    c.frame(r.desc.id() + "  AUC=" + fmt(r.auc, "%.3f"), "false positive rate",
            "true positive rate");
    c.line(c.px(0), c.py(0), c.px(1), c.py(1),
           "stroke=\"grey\" stroke-dasharray=\"4 3\"");
    std::vector<std::pair<double, double>> pts;
    for (const auto& [fpr, tpr] : r.points) pts.emplace_back(c.px(fpr), c.py(tpr));
    c.polyline(pts, "stroke=\"steelblue\" stroke-width=\"1.5\"");
    for (double t : {0.0, 0.5, 1.0}) {
        c.text(c.px(t) - 8, c.py(0) + 16, fmt(t, "%.1f"));
        c.text(c.px(0) - 30, c.py(t) + 4, fmt(t, "%.1f"));
    }
    return c.render();
}

std::string sweep_svg(const GroupKey& k,
                      const std::vector<std::pair<std::size_t, double>>& curve) {
    SvgCanvas c;
    c.frame(k.task + " " + k.model + " " + k.modalities, "training sequences",
            "mean AUC");
    const double xmax = double(curve.back().first);
    const double xmin = double(curve.front().first);
    auto xu = [&](std::size_t n) {
        return xmax == xmin ? 0.5 : (double(n) - xmin) / (xmax - xmin);
    };
    std::vector<std::pair<double, double>> pts;
    for (const auto& [n, auc] : curve) {
        pts.emplace_back(c.px(xu(n)), c.py(auc));
        c.text(c.px(xu(n)) - 10, c.py(0) + 16, std::to_string(n));
        c.text(c.px(xu(n)) - 14, c.py(auc) - 8, fmt(auc, "%.3f"));
    }
    c.polyline(pts, "stroke=\"firebrick\" stroke-width=\"1.5\"");
    for (double t : {0.0, 0.5, 1.0})
        c.text(c.px(0) - 30, c.py(t) + 4, fmt(t, "%.1f"));
    return c.render();
}

}  // namespace

void report(const std::vector<RocReport>& reports, const std::string& out_dir,
            const json& manifest_extra) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<std::string> names;
    auto emit = [&](const std::string& name, const std::string& content) {
        write_file((fs::path(out_dir) / name).string(), content);
        names.push_back(name);
    };

    emit("metrics.csv", metrics_csv(reports));
    for (const auto& r : reports) {
        emit("roc_" + r.desc.id() + ".csv", roc_csv(r));
        emit("roc_" + r.desc.id() + ".svg", roc_svg(r));
    }

    // one sweep curve per group that spans several train sizes
    struct SweepKey {
        std::string task, model, modalities;
        auto operator<=>(const SweepKey&) const = default;
    };
    std::map<SweepKey, std::map<std::size_t, std::pair<double, std::size_t>>> sweeps;
    for (const auto& r : reports) {
        auto& cell = sweeps[{r.desc.task, r.desc.model, r.desc.modalities}]
                           [r.desc.train_size];
        cell.first += r.auc;
        cell.second += 1;
    }
    for (const auto& [k, by_size] : sweeps) {
        if (by_size.size() < 2) continue;
        std::vector<std::pair<std::size_t, double>> curve;
        for (const auto& [n, cell] : by_size)
            curve.emplace_back(n, cell.first / double(cell.second));
        emit("sweep_" + k.task + "_" + k.model + "_" + k.modalities + ".svg",
             sweep_svg({k.task, k.model, k.modalities, 0}, curve));
    }

    json manifest;
    manifest["reports"] = reports.size();
    json files = json::object();
    std::sort(names.begin(), names.end());
    for (const auto& name : names)
        files[name] = file_digest((fs::path(out_dir) / name).string());
    manifest["files"] = std::move(files);
    for (const auto& [k, v] : manifest_extra.items()) manifest[k] = v;
    write_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "' for digest");
    std::uint64_t h = 14695981039346656037ull;
    char buf[4096];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= std::uint64_t(static_cast<unsigned char>(buf[i]));
            h *= 1099511628211ull;
        }
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
    return out;
}

}  // namespace ehrseq::evalkit
