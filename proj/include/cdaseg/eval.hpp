#ifndef CDASEG_EVAL_HPP
#define CDASEG_EVAL_HPP

// Metrics, experiment configuration and orchestration (ablation, Table-1 style
// distribution study) plus text/CSV report formatting.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdaseg/common.hpp"
#include "cdaseg/labeldist.hpp"
#include "cdaseg/raster.hpp"
#include "cdaseg/scenegen.hpp"
#include "cdaseg/segnet.hpp"
#include "cdaseg/superpix.hpp"

namespace cdaseg {

// ---------------------------------------------------------------------------
// Confusion and IoU

/// Rows are truth, columns prediction. Pixels predicted void (only produced by
/// the landmark painting) are kept per truth class and scored as false negatives.
struct ConfusionCounts {
    int num_classes = 0;
    std::vector<std::uint64_t> matrix;          // C x C
    std::vector<std::uint64_t> void_predicted;  // per truth class
    std::uint64_t void_skipped = 0;             // void truth pixels

    ConfusionCounts() = default;
    explicit ConfusionCounts(int c)
        : num_classes(c), matrix(static_cast<std::size_t>(c) * c, 0), void_predicted(static_cast<std::size_t>(c), 0) {}

    std::uint64_t at(int truth, int pred) const { return matrix[static_cast<std::size_t>(truth) * num_classes + pred]; }

    std::uint64_t total() const {
        std::uint64_t t = void_skipped;
        for (auto v : matrix) t += v;
        for (auto v : void_predicted) t += v;
        return t;
    }

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        if (o.num_classes != num_classes) throw ShapeError("confusion class counts differ");
        for (std::size_t i = 0; i < matrix.size(); ++i) matrix[i] += o.matrix[i];
        for (std::size_t i = 0; i < void_predicted.size(); ++i) void_predicted[i] += o.void_predicted[i];
        void_skipped += o.void_skipped;
        return *this;
    }

    bool operator==(const ConfusionCounts&) const = default;
};

inline void accumulate_confusion(const LabelMask& pred, const LabelMask& truth, ConfusionCounts& counts) {
    if (pred.width != truth.width || pred.height != truth.height) throw ShapeError("prediction and truth sizes differ");
    if (pred.num_classes != counts.num_classes || truth.num_classes != counts.num_classes)
        throw ShapeError("class count mismatch in confusion accumulation");
    const int C = counts.num_classes;
    for (std::size_t p = 0; p < truth.labels.size(); ++p) {
        const int t = truth.labels[p];
        if (t == LabelMask::kVoid) {
            ++counts.void_skipped;
            continue;
        }
        const int y = pred.labels[p];
        if (t >= C) throw LabelRangeError(static_cast<int>(p / truth.width), static_cast<int>(p % truth.width), t, C);
        if (y == LabelMask::kVoid)
            ++counts.void_predicted[t];
        else if (y >= C)
            throw LabelRangeError(static_cast<int>(p / pred.width), static_cast<int>(p % pred.width), y, C);
        else
            ++counts.matrix[static_cast<std::size_t>(t) * C + y];
    }
}

struct Metrics {
    std::vector<double> per_class_iou;  // -1 marks an undefined class
    double mean_iou = 0.0;
    std::optional<double> chi2_mean;
    std::optional<double> sp_accuracy;
};

inline constexpr double kUndefinedIou = -1.0;

inline Metrics iou_from_confusion(const ConfusionCounts& m) {
    const int C = m.num_classes;
    Metrics out;
    out.per_class_iou.assign(static_cast<std::size_t>(C), kUndefinedIou);
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < C; ++c) {
        const std::uint64_t tp = m.at(c, c);
        std::uint64_t fp = 0, fn = m.void_predicted[c];
        for (int j = 0; j < C; ++j)
            if (j != c) {
                fp += m.at(j, c);
                fn += m.at(c, j);
            }
        const std::uint64_t den = tp + fp + fn;
        if (den == 0) continue;
        out.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(den);
        sum += out.per_class_iou[c];
        ++defined;
    }
    out.mean_iou = defined ? sum / defined : 0.0;
    return out;
}

/// Whole-set confusion of `predict(image)` against the masks, accumulated in item order.
inline ConfusionCounts confusion_over(const Dataset& ds, const std::function<LabelMask(std::size_t)>& predict) {
    for (const auto& it : ds.items)
        if (!it.mask) throw Error("evaluation item " + it.id + " has no mask");
    std::vector<ConfusionCounts> per(ds.items.size(), ConfusionCounts(ds.num_classes));
    parallel_for(ds.items.size(), [&](std::size_t i) { accumulate_confusion(predict(i), *ds.items[i].mask, per[i]); });
    ConfusionCounts total(ds.num_classes);
    for (const auto& c : per) total += c;
    return total;
}

inline Metrics evaluate_model(const SegModel& model, const Dataset& ds) {
    if (model.num_classes() != ds.num_classes) throw ShapeError("model and dataset class counts differ");
    return iou_from_confusion(confusion_over(ds, [&](std::size_t i) { return forward(model, ds.items[i].image).argmax(); }));
}

// ---------------------------------------------------------------------------
// Configuration: flat "section.key = value" text, '#' starts a comment

struct ExperimentConfig {
    std::uint64_t seed = 0;
    int width = 64;
    int height = 64;
    std::size_t source_count = 200;
    std::size_t target_train_count = 100;
    std::size_t target_test_count = 100;
    std::string data_dir;  // empty: generate in memory
    DomainParams source = preset_source();
    DomainParams target = preset_target();
    Estimator estimator = Estimator::LogReg;
    GlobalEstimatorOptions labeldist;
    SuperpixelOptions superpix;
    std::string arch = "default";
    TrainConfig train;                      // regime is set per run
    std::size_t noadapt_batch_source = 15;  // baseline batch (no target images)
    std::string output_dir = "out";

    int num_classes() const { return source.num_classes; }

    void validate() const {
        source.validate();
        target.validate();
        if (source.num_classes != target.num_classes) throw ConfigError("source and target class counts differ");
        if (width < 4 || height < 4) throw ConfigError("images must be at least 4x4");
        if (!source_count || !target_train_count || !target_test_count) throw ConfigError("split sizes must be >= 1");
        if (superpix.count < 1 || static_cast<std::size_t>(superpix.count) > static_cast<std::size_t>(width) * height)
            throw ConfigError("superpix.count must be in [1, W*H]");
        if (!(superpix.fraction > 0.0 && superpix.fraction <= 1.0)) throw ConfigError("superpix.fraction must be in (0, 1]");
        if (!(superpix.compactness > 0.0)) throw ConfigError("superpix.compactness must be > 0");
        if (noadapt_batch_source < 1) throw ConfigError("train.noadapt_batch_source must be >= 1");
        arch_preset(arch, num_classes());
        TrainConfig t = train;
        t.regime = Regime::ImageSuperpixel;
        t.validate();
    }

    TrainConfig train_config(Regime r) const {
        TrainConfig t = train;
        t.regime = r;
        // every regime takes the same number of optimizer steps
        if (t.steps_per_epoch == 0) t.steps_per_epoch = std::max<std::size_t>(1, source_count / train.batch_source);
        if (r == Regime::NoAdapt) {
            t.batch_source = noadapt_batch_source;
            t.batch_target = 0;
        }
        return t;
    }
};

namespace detail {

inline std::string fmt_num(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Canonical key/value listing; every field appears, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> config_key_values(const ExperimentConfig& c) {
    using detail::fmt_num;
    std::vector<std::pair<std::string, std::string>> kv = {
        {"seed", std::to_string(c.seed)},
        {"data.width", std::to_string(c.width)},
        {"data.height", std::to_string(c.height)},
        {"data.source_count", std::to_string(c.source_count)},
        {"data.target_train_count", std::to_string(c.target_train_count)},
        {"data.target_test_count", std::to_string(c.target_test_count)},
        {"data.dir", c.data_dir},
    };
    for (auto& p : to_key_values(c.source, "source.")) kv.push_back(std::move(p));
    for (auto& p : to_key_values(c.target, "target.")) kv.push_back(std::move(p));
    const auto& l = c.labeldist;
    const auto& s = c.superpix;
    const auto& t = c.train;
    std::vector<std::pair<std::string, std::string>> rest = {
        {"labeldist.estimator", estimator_name(c.estimator)},
        {"labeldist.standardize", l.standardize ? "1" : "0"},
        {"labeldist.per_domain_standardize", l.per_domain_standardize ? "1" : "0"},
        {"labeldist.knn_k", std::to_string(l.knn_k)},
        {"labeldist.logreg.epochs", std::to_string(l.logreg.epochs)},
        {"labeldist.logreg.lr", fmt_num(l.logreg.lr)},
        {"labeldist.logreg.l2", fmt_num(l.logreg.l2)},
        {"labeldist.logreg.batch_size", std::to_string(l.logreg.batch_size)},
        {"superpix.count", std::to_string(s.count)},
        {"superpix.compactness", fmt_num(s.compactness)},
        {"superpix.iters", std::to_string(s.iters)},
        {"superpix.fraction", fmt_num(s.fraction)},
        {"superpix.score_temperature", fmt_num(s.score_temperature)},
        {"superpix.confidence", s.confidence == ConfidenceMode::Margin ? "margin" : "raw"},
        {"superpix.normalize_intensity", s.normalize_intensity ? "1" : "0"},
        {"superpix.svm.epochs", std::to_string(s.svm.epochs)},
        {"superpix.svm.lambda", fmt_num(s.svm.lambda)},
        {"train.arch", c.arch},
        {"train.gamma", fmt_num(t.gamma)},
        {"train.epochs", std::to_string(t.epochs)},
        {"train.steps_per_epoch", std::to_string(t.steps_per_epoch)},
        {"train.batch_source", std::to_string(t.batch_source)},
        {"train.batch_target", std::to_string(t.batch_target)},
        {"train.noadapt_batch_source", std::to_string(c.noadapt_batch_source)},
        {"train.adadelta_rho", fmt_num(t.adadelta_rho)},
        {"train.adadelta_eps", fmt_num(t.adadelta_eps)},
        {"train.weight_image", fmt_num(t.weight_image)},
        {"train.weight_superpixel", fmt_num(t.weight_superpixel)},
        {"output.dir", c.output_dir},
    };
    for (auto& p : rest) kv.push_back(std::move(p));
    return kv;
}

inline void apply_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
    auto num = [&]() -> double {
        try {
            std::size_t used = 0;
            const double v = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("bad number for " + key + ": '" + value + "'");
        }
    };
    auto count = [&]() -> std::size_t {
        const double v = num();
        if (v < 0 || v != std::floor(v)) throw ConfigError(key + " must be a non-negative integer");
        return static_cast<std::size_t>(v);
    };
    auto integer = [&]() -> int {
        const double v = num();
        if (v != std::floor(v)) throw ConfigError(key + " must be an integer");
        return static_cast<int>(v);
    };
    auto flag = [&]() -> bool {
        if (value == "1" || value == "true" || value == "yes") return true;
        if (value == "0" || value == "false" || value == "no") return false;
        throw ConfigError("bad boolean for " + key + ": '" + value + "'");
    };
    auto l = [&](const char* k) { return key == k; };

    if (key.rfind("source.", 0) == 0) {
        if (!apply_key_value(c.source, key.substr(7), value)) throw ConfigError("unknown config key '" + key + "'");
    } else if (key.rfind("target.", 0) == 0) {
        if (!apply_key_value(c.target, key.substr(7), value)) throw ConfigError("unknown config key '" + key + "'");
    } else if (l("seed")) {
        c.seed = count();
    } else if (l("data.width")) {
        c.width = integer();
    } else if (l("data.height")) {
        c.height = integer();
    } else if (l("data.source_count")) {
        c.source_count = count();
    } else if (l("data.target_train_count")) {
        c.target_train_count = count();
    } else if (l("data.target_test_count")) {
        c.target_test_count = count();
    } else if (l("data.dir")) {
        c.data_dir = value;
    } else if (l("labeldist.estimator")) {
        c.estimator = parse_estimator(value);
    } else if (l("labeldist.standardize")) {
        c.labeldist.standardize = flag();
    } else if (l("labeldist.per_domain_standardize")) {
        c.labeldist.per_domain_standardize = flag();
    } else if (l("labeldist.knn_k")) {
        c.labeldist.knn_k = count();
    } else if (l("labeldist.logreg.epochs")) {
        c.labeldist.logreg.epochs = integer();
    } else if (l("labeldist.logreg.lr")) {
        c.labeldist.logreg.lr = num();
    } else if (l("labeldist.logreg.l2")) {
        c.labeldist.logreg.l2 = num();
    } else if (l("labeldist.logreg.batch_size")) {
        c.labeldist.logreg.batch_size = count();
    } else if (l("superpix.count")) {
        c.superpix.count = integer();
    } else if (l("superpix.compactness")) {
        c.superpix.compactness = num();
    } else if (l("superpix.iters")) {
        c.superpix.iters = integer();
    } else if (l("superpix.fraction")) {
        c.superpix.fraction = num();
    } else if (l("superpix.score_temperature")) {
        c.superpix.score_temperature = num();
    } else if (l("superpix.confidence")) {
        if (value == "margin")
            c.superpix.confidence = ConfidenceMode::Margin;
        else if (value == "raw")
            c.superpix.confidence = ConfidenceMode::Raw;
        else
            throw ConfigError("superpix.confidence must be margin or raw");
    } else if (l("superpix.normalize_intensity")) {
        c.superpix.normalize_intensity = flag();
    } else if (l("superpix.svm.epochs")) {
        c.superpix.svm.epochs = integer();
    } else if (l("superpix.svm.lambda")) {
        c.superpix.svm.lambda = num();
    } else if (l("train.arch")) {
        c.arch = value;
    } else if (l("train.gamma")) {
        c.train.gamma = num();
    } else if (l("train.epochs")) {
        c.train.epochs = integer();
    } else if (l("train.steps_per_epoch")) {
        c.train.steps_per_epoch = count();
    } else if (l("train.batch_source")) {
        c.train.batch_source = count();
    } else if (l("train.batch_target")) {
        c.train.batch_target = count();
    } else if (l("train.noadapt_batch_source")) {
        c.noadapt_batch_source = count();
    } else if (l("train.adadelta_rho")) {
        c.train.adadelta_rho = num();
    } else if (l("train.adadelta_eps")) {
        c.train.adadelta_eps = num();
    } else if (l("train.weight_image")) {
        c.train.weight_image = num();
    } else if (l("train.weight_superpixel")) {
        c.train.weight_superpixel = num();
    } else if (l("output.dir")) {
        c.output_dir = value;
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

/// "key=value" override, as given on the command line.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    apply_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        try {
            apply_override(c, line);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(n) + ": " + e.what());
        }
    }
}

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c;
    apply_config_text(c, text);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return parse_config(std::string(bytes.begin(), bytes.end()));
}

inline std::string format_config(const ExperimentConfig& c) {
    std::string out;
    for (const auto& [k, v] : config_key_values(c)) out += k + " = " + v + "\n";
    return out;
}

/// FNV-1a 64 over the canonical config text, leaving out where results are written.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [k, v] : config_key_values(c)) {
        if (k == "output.dir") continue;
        for (unsigned char ch : k + "=" + v + "\n") {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportFormatVersion = 1;

struct Report {
    std::string title;
    std::vector<std::string> columns;  // first column is the row label
    struct Row {
        std::string label;
        std::vector<double> values;
    };
    std::vector<Row> rows;
    std::vector<std::string> footer;  // provenance lines, written after '#'

    static std::string number(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", v);
        return buf;
    }

    std::string to_csv() const {
        std::string out;
        for (std::size_t i = 0; i < columns.size(); ++i) out += (i ? "," : "") + columns[i];
        out += "\n";
        for (const auto& r : rows) {
            out += r.label;
            for (double v : r.values) out += "," + number(v);
            out += "\n";
        }
        for (const auto& f : footer) out += "# " + f + "\n";
        return out;
    }

    /// Aligned table; '*' marks each numeric column's maximum, "n/a" the undefined sentinel.
    std::string to_text() const {
        const std::size_t ncol = columns.size();
        std::vector<std::vector<std::string>> cells(rows.size(), std::vector<std::string>(ncol));
        std::vector<double> best(ncol, -std::numeric_limits<double>::infinity());
        for (const auto& r : rows)
            for (std::size_t j = 0; j < r.values.size(); ++j) best[j + 1] = std::max(best[j + 1], r.values[j]);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            cells[i][0] = rows[i].label;
            for (std::size_t j = 0; j < rows[i].values.size(); ++j) {
                const double v = rows[i].values[j];
                char buf[32];
                if (v == kUndefinedIou)
                    std::snprintf(buf, sizeof buf, "n/a");
                else
                    std::snprintf(buf, sizeof buf, "%.4f%s", v, v == best[j + 1] ? "*" : " ");
                cells[i][j + 1] = buf;
            }
        }
        std::vector<std::size_t> width(ncol, 0);
        for (std::size_t j = 0; j < ncol; ++j) {
            width[j] = columns[j].size();
            for (const auto& row : cells) width[j] = std::max(width[j], row[j].size());
        }
        std::string out = title.empty() ? "" : title + "\n";
        auto line = [&](const std::vector<std::string>& v) {
            for (std::size_t j = 0; j < ncol; ++j) {
                std::string cell = v[j];
                const std::size_t pad = width[j] - cell.size();
                out += j == 0 ? cell + std::string(pad, ' ') : std::string(pad, ' ') + cell;
                out += j + 1 < ncol ? "  " : "\n";
            }
        };
        line(columns);
        for (const auto& row : cells) line(row);
        for (const auto& f : footer) out += "# " + f + "\n";
        return out;
    }

    /// Inverse of to_csv (footer lines are kept verbatim).
    static Report parse_csv(const std::string& text) {
        Report r;
        std::istringstream in(text);
        std::string line;
        bool header = true;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line[0] == '#') {
                r.footer.push_back(line.size() > 2 ? line.substr(2) : "");
                continue;
            }
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            if (header) {
                r.columns = cells;
                header = false;
                continue;
            }
            if (cells.size() != r.columns.size()) throw FormatError("CSV row has the wrong number of cells", 0);
            Row row{cells[0], {}};
            for (std::size_t j = 1; j < cells.size(); ++j) row.values.push_back(std::stod(cells[j]));
            r.rows.push_back(std::move(row));
        }
        return r;
    }

    const Row& row(const std::string& label) const {
        for (const auto& r : rows)
            if (r.label == label) return r;
        throw Error("report has no row '" + label + "'");
    }

    void write(const std::filesystem::path& stem) const {
        std::error_code ec;
        if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path(), ec);
        const std::string csv = to_csv(), txt = to_text();
        auto path_with = [&](const char* ext) {
            auto p = stem;
            p += ext;
            return p;
        };
        detail::write_file(path_with(".csv"), std::span<const std::uint8_t>(
                                                  reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
        detail::write_file(path_with(".txt"), std::span<const std::uint8_t>(
                                                  reinterpret_cast<const std::uint8_t*>(txt.data()), txt.size()));
    }
};

inline std::vector<std::string> provenance(const ExperimentConfig& c) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "config_hash=%016" PRIx64 " seed=%" PRIu64 " format_version=%d", config_hash(c),
                  c.seed, kReportFormatVersion);
    return {buf};
}

// ---------------------------------------------------------------------------
// Experiment orchestration

/// Data, source-trained estimators and inferred target properties shared by all regimes.
struct Experiment {
    ExperimentConfig config;
    Dataset source, target_train, target_test;
    std::vector<Image> target_train_images;  // masks stripped: training never sees them
    GlobalEstimators global;
    SuperpixelClassifier superpixels;
    std::vector<TargetProperties> properties;  // per target_train image

    std::uint64_t model_seed() const { return derive_seed(config.seed, 104); }
    std::uint64_t train_seed() const { return derive_seed(config.seed, 105); }

    /// Datasets only (generated from the config, or read from data.dir).
    static Experiment prepare_data(const ExperimentConfig& cfg) {
        cfg.validate();
        Experiment e;
        e.config = cfg;
        const int C = cfg.num_classes();
        if (cfg.data_dir.empty()) {
            e.source = generate_dataset(cfg.source, cfg.source_count, cfg.width, cfg.height, derive_seed(cfg.seed, 101));
            e.target_train = generate_dataset(cfg.target, cfg.target_train_count, cfg.width, cfg.height,
                                              derive_seed(cfg.seed, 102), Domain::Target);
            e.target_test = generate_dataset(cfg.target, cfg.target_test_count, cfg.width, cfg.height,
                                             derive_seed(cfg.seed, 103), Domain::Target);
        } else {
            e.source = load_dataset(cfg.data_dir, "source", C, Domain::Source, true);
            e.target_train = load_dataset(cfg.data_dir, "target_train", C, Domain::Target);
            e.target_test = load_dataset(cfg.data_dir, "target_test", C, Domain::Target, true);
        }
        e.target_train_images = e.target_train.images();
        return e;
    }

    /// Datasets plus source-trained estimators and the inferred target properties.
    static Experiment prepare(const ExperimentConfig& cfg) {
        Experiment e = prepare_data(cfg);
        auto lopt = cfg.labeldist;
        lopt.logreg.seed = derive_seed(cfg.seed, 106);
        e.global = GlobalEstimators::fit(e.source, lopt);
        auto sopt = cfg.superpix;
        sopt.svm.seed = derive_seed(cfg.seed, 107);
        e.superpixels = SuperpixelClassifier::fit(e.source, cfg.source.palette, sopt);
        e.properties = infer_properties(e.target_train_images, e.global, cfg.estimator, e.superpixels);
        return e;
    }

    TrainResult train_regime(Regime r) const {
        auto tc = config.train_config(r);
        tc.seed = train_seed();
        const auto init = init_model(arch_preset(config.arch, config.num_classes()), model_seed());
        if (r == Regime::NoAdapt) return train(tc, init, source, {}, {});
        return train(tc, init, source, target_train_images, properties);
    }

    /// Superpixel analyses of the target test split.
    std::vector<SuperpixelAnalysis> analyze_test() const {
        std::vector<SuperpixelAnalysis> out(target_test.items.size());
        parallel_for(out.size(), [&](std::size_t i) { out[i] = superpixels.analyze(target_test.items[i].image); });
        return out;
    }
};

inline std::vector<std::string> iou_columns(int C) {
    std::vector<std::string> cols{"method", "mean_iou"};
    for (int c = 0; c < C; ++c) cols.push_back(class_name(c));
    return cols;
}

inline Report::Row metrics_row(const std::string& label, const Metrics& m) {
    Report::Row r{label, {m.mean_iou}};
    r.values.insert(r.values.end(), m.per_class_iou.begin(), m.per_class_iou.end());
    return r;
}

inline const std::vector<std::string>& ablation_labels() {
    static const std::vector<std::string> labels = {"NoAdapt", "Ours(I)", "SP", "SP Lndmk", "Ours(SP)", "Ours(I+SP)"};
    return labels;
}

struct AblationResult {
    Report report;
    double sp_accuracy = 0.0;        // all superpixels, target test split
    double landmark_accuracy = 0.0;  // landmark superpixels only
};

/// Trains and evaluates the six rows on the target test split. `on_row` sees the
/// partial report after every row (used to flush partial results).
inline AblationResult run_ablation(const Experiment& e, const std::function<void(const Report&)>& on_row = nullptr) {
    const int C = e.config.num_classes();
    AblationResult out;
    out.report.title = "segmentation ablation on the target test split (IoU)";
    out.report.columns = iou_columns(C);
    out.report.footer = provenance(e.config);
    auto push = [&](const std::string& label, const Metrics& m) {
        out.report.rows.push_back(metrics_row(label, m));
        if (on_row) on_row(out.report);
    };
    auto model_row = [&](const std::string& label, Regime r) { push(label, evaluate_model(e.train_regime(r).model, e.target_test)); };

    model_row("NoAdapt", Regime::NoAdapt);
    model_row("Ours(I)", Regime::Image);
    const auto analyses = e.analyze_test();
    SuperpixelAccuracy acc;
    for (std::size_t i = 0; i < analyses.size(); ++i) acc.add(analyses[i], *e.target_test.items[i].mask);
    out.sp_accuracy = acc.all();
    out.landmark_accuracy = acc.landmarks();
    for (bool landmarks_only : {false, true}) {
        auto m = iou_from_confusion(confusion_over(
            e.target_test, [&](std::size_t i) { return paint_superpixels(analyses[i], C, landmarks_only); }));
        m.sp_accuracy = landmarks_only ? out.landmark_accuracy : out.sp_accuracy;
        push(landmarks_only ? "SP Lndmk" : "SP", m);
    }
    model_row("Ours(SP)", Regime::Superpixel);
    model_row("Ours(I+SP)", Regime::ImageSuperpixel);
    return out;
}

/// Mean chi-squared distance to the true target-test distributions per estimator.
/// The NoAdapt row (distribution of the baseline's predictions) is optional since it needs training.
inline Report run_table1(const Experiment& e, const SegModel* noadapt = nullptr) {
    const auto& test = e.target_test;
    std::vector<LabelDistribution> truth(test.items.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (!test.items[i].mask) throw Error("table1 needs target test masks");
        truth[i] = dist_from_mask(*test.items[i].mask);
    }
    const auto images = test.images();
    auto mean_chi2 = [&](const std::vector<LabelDistribution>& est) {
        double s = 0.0;
        for (std::size_t i = 0; i < truth.size(); ++i) s += chi2_distance(truth[i], est[i]);
        return s / static_cast<double>(truth.size());
    };
    Report r;
    r.title = "label distribution estimates on the target test split (mean chi2)";
    r.columns = {"method", "chi2"};
    r.footer = provenance(e.config);
    r.rows.push_back({"Uniform", {mean_chi2(e.global.estimate_all(Estimator::Uniform, images))}});
    if (noadapt) {
        std::vector<LabelDistribution> est(images.size());
        parallel_for(images.size(), [&](std::size_t i) { est[i] = dist_from_prediction(forward(*noadapt, images[i])); });
        r.rows.push_back({"NoAdapt", {mean_chi2(est)}});
    }
    r.rows.push_back({"Src mean", {mean_chi2(e.global.estimate_all(Estimator::SourceMean, images))}});
    r.rows.push_back({"kNN", {mean_chi2(e.global.estimate_all(Estimator::Knn, images))}});
    r.rows.push_back({"LR", {mean_chi2(e.global.estimate_all(Estimator::LogReg, images))}});
    return r;
}

}  // namespace cdaseg

#endif  // CDASEG_EVAL_HPP
