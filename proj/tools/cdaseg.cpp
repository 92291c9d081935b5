// cdaseg command-line driver.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cdaseg/eval.hpp"

namespace fs = std::filesystem;
using namespace cdaseg;

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value config file");
        sub->add_option("--set", overrides, "override one config key (key=value), repeatable");
        sub->add_option("--seed", seed, "experiment seed");
    }

    ExperimentConfig load() const {
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
        for (const auto& o : overrides) apply_override(cfg, o);
        if (seed) cfg.seed = *seed;
        cfg.validate();
        return cfg;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    detail::write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string format_dist(const std::string& id, const LabelDistribution& d) {
    std::string line = id;
    for (double v : d.probs) line += " " + Report::number(v);
    return line + "\n";
}

void print_metrics(const Metrics& m) {
    std::printf("mean_iou %s\n", Report::number(m.mean_iou).c_str());
    for (std::size_t c = 0; c < m.per_class_iou.size(); ++c)
        std::printf("iou %-12s %s\n", class_name(static_cast<int>(c)).c_str(),
                    m.per_class_iou[c] == kUndefinedIou ? "n/a" : Report::number(m.per_class_iou[c]).c_str());
}

int cmd_gen(const ExperimentConfig& cfg, const std::string& dir_opt) {
    auto data_cfg = cfg;
    data_cfg.data_dir.clear();  // always generate
    const auto e = Experiment::prepare_data(data_cfg);
    const fs::path dir = dir_opt.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(dir_opt);
    save_dataset(e.source, dir, "source");
    save_dataset(e.target_train, dir, "target_train");
    save_dataset(e.target_test, dir, "target_test");
    write_text(dir / "config.txt", format_config(cfg));
    std::printf("wrote %zu source, %zu target_train, %zu target_test images to %s\n", e.source.size(),
                e.target_train.size(), e.target_test.size(), dir.string().c_str());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& regime_name_opt, const std::string& ckpt_opt) {
    const Regime r = parse_regime(regime_name_opt);
    const auto e = r == Regime::NoAdapt ? Experiment::prepare_data(cfg) : Experiment::prepare(cfg);
    const auto res = e.train_regime(r);
    const fs::path ckpt = ckpt_opt.empty() ? fs::path(cfg.output_dir) / (regime_name(r) + ".ckpt") : fs::path(ckpt_opt);
    if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
    save_checkpoint(res.model, res.state, ckpt);
    std::string hist = "epoch,loss,source_term,target_term\n";
    for (const auto& h : res.history)
        hist += std::to_string(h.epoch) + "," + Report::number(h.loss) + "," + Report::number(h.source_term) + "," +
                Report::number(h.target_term) + "\n";
    auto hist_path = ckpt;
    hist_path += ".history.csv";
    write_text(hist_path, hist);
    const auto m = evaluate_model(res.model, e.target_test);
    std::printf("regime %s, %d epochs, checkpoint %s\n", regime_name(r).c_str(), cfg.train.epochs, ckpt.string().c_str());
    print_metrics(m);
    return 0;
}

int cmd_infer_dist(const ExperimentConfig& cfg, const std::string& estimator_opt, const std::string& out_opt) {
    auto c = cfg;
    if (!estimator_opt.empty()) c.estimator = parse_estimator(estimator_opt);
    auto e = Experiment::prepare_data(c);
    auto lopt = c.labeldist;
    lopt.logreg.seed = derive_seed(c.seed, 106);
    const auto global = GlobalEstimators::fit(e.source, lopt);
    const auto dists = global.estimate_all(c.estimator, e.target_train_images);
    std::string text;
    for (std::size_t i = 0; i < dists.size(); ++i) text += format_dist(e.target_train.items[i].id, dists[i]);
    const fs::path out =
        out_opt.empty() ? fs::path(c.output_dir) / ("distributions_" + estimator_name(c.estimator) + ".txt") : fs::path(out_opt);
    write_text(out, text);
    std::printf("wrote %zu distributions (%s) to %s\n", dists.size(), estimator_name(c.estimator).c_str(),
                out.string().c_str());
    return 0;
}

int cmd_superpix(const ExperimentConfig& cfg, const std::string& out_opt) {
    auto e = Experiment::prepare_data(cfg);
    auto sopt = cfg.superpix;
    sopt.svm.seed = derive_seed(cfg.seed, 107);
    const auto sc = SuperpixelClassifier::fit(e.source, cfg.source.palette, sopt);
    const fs::path dir = out_opt.empty() ? fs::path(cfg.output_dir) / "superpix" : fs::path(out_opt);
    fs::create_directories(dir);
    std::vector<SuperpixelAnalysis> analyses(e.target_train.size());
    parallel_for(analyses.size(), [&](std::size_t i) { analyses[i] = sc.analyze(e.target_train.items[i].image); });
    for (std::size_t i = 0; i < analyses.size(); ++i) {
        const auto& a = analyses[i];
        if (a.partition.count <= 255) save_mask(a.partition.as_mask(), dir / indexed_name("sp", i, "pgm"));
        save_tensor(Tensor({static_cast<std::uint32_t>(a.partition.height), static_cast<std::uint32_t>(a.partition.width)},
                           std::vector<float>(a.partition.assignment.begin(), a.partition.assignment.end())),
                    dir / indexed_name("sp", i, "cdat"));
        save_landmarks(a.landmarks, dir / indexed_name("landmarks", i, "txt"));
    }
    save_svm(sc.svm, dir / "svm.cdat");
    std::printf("wrote %zu partitions and landmark lists to %s\n", analyses.size(), dir.string().c_str());
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& ckpt, bool oracle) {
    const auto e = Experiment::prepare_data(cfg);
    Metrics m;
    if (oracle) {
        m = iou_from_confusion(confusion_over(e.target_test, [&](std::size_t i) { return *e.target_test.items[i].mask; }));
    } else {
        if (ckpt.empty()) throw ConfigError("eval needs --checkpoint or --oracle");
        m = evaluate_model(load_checkpoint(ckpt).model, e.target_test);
    }
    print_metrics(m);
    return 0;
}

int cmd_ablation(const ExperimentConfig& cfg) {
    const fs::path stem = fs::path(cfg.output_dir) / "ablation";
    const auto e = Experiment::prepare(cfg);
    const auto res = run_ablation(e, [&](const Report& partial) {
        partial.write(stem);
        std::printf("%-10s mean_iou %s\n", partial.rows.back().label.c_str(),
                    Report::number(partial.rows.back().values[0]).c_str());
        std::fflush(stdout);
    });
    std::printf("superpixel accuracy %s, landmarks %s\n", Report::number(res.sp_accuracy).c_str(),
                Report::number(res.landmark_accuracy).c_str());
    std::printf("%s", res.report.to_text().c_str());
    return 0;
}

int cmd_table1(const ExperimentConfig& cfg, bool with_noadapt) {
    const auto e = Experiment::prepare(cfg);
    std::optional<SegModel> baseline;
    if (with_noadapt) baseline = e.train_regime(Regime::NoAdapt).model;
    const auto r = run_table1(e, baseline ? &*baseline : nullptr);
    r.write(fs::path(cfg.output_dir) / "table1");
    std::printf("%s", r.to_text().c_str());
    return 0;
}

int cmd_gradcheck(const ExperimentConfig& cfg, int probes) {
    GradCheckOptions opt;
    opt.seed = cfg.seed;
    opt.probes = probes;
    const auto rep = run_gradcheck(opt);
    for (std::size_t i = 0; i < rep.probes.size(); ++i) {
        const auto& p = rep.probes[i];
        std::printf("probe %2zu  regime %-7s gamma %.3f  C=%d  max rel error %.3e\n", i, regime_name(p.regime).c_str(),
                    p.gamma, p.num_classes, p.max_rel_error);
    }
    constexpr double kTolerance = 1e-3;
    std::printf("max relative error %.3e (tolerance %.0e)\n", rep.max_rel_error, kTolerance);
    return rep.max_rel_error <= kTolerance ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"segmentation domain adaptation from inferred target label distributions, on synthetic scenes"};
    app.require_subcommand(1);

    Common common;
    std::string dir, regime = "i+sp", checkpoint, estimator, out;
    bool oracle = false, with_noadapt = false;
    int probes = 20;

    auto* gen = app.add_subcommand("gen", "generate the source / target datasets");
    gen->add_option("--dir", dir, "output directory (default <output.dir>/data)");
    auto* train_cmd = app.add_subcommand("train", "train one regime and write a checkpoint");
    train_cmd->add_option("--regime", regime, "noadapt | i | sp | i+sp");
    train_cmd->add_option("--checkpoint", checkpoint, "checkpoint path (default <output.dir>/<regime>.ckpt)");
    auto* infer = app.add_subcommand("infer-dist", "estimate target label distributions");
    infer->add_option("--estimator", estimator, "lr | knn | srcmean | uniform");
    infer->add_option("--out", out, "output file");
    auto* sp = app.add_subcommand("superpix", "superpixel partitions and landmarks of the target images");
    sp->add_option("--out", out, "output directory");
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the target test split");
    ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
    ev->add_flag("--oracle", oracle, "score the ground truth against itself");
    auto* abl = app.add_subcommand("ablation", "train and score all six ablation rows");
    auto* t1 = app.add_subcommand("table1", "chi-squared study of the label distribution estimators");
    t1->add_flag("--noadapt", with_noadapt, "also train the baseline and score its predicted distributions");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training gradient");
    gc->add_option("--probes", probes, "number of random probes")->check(CLI::PositiveNumber);
    for (auto* s : {gen, train_cmd, infer, sp, ev, abl, t1, gc}) common.attach(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        const auto cfg = common.load();
        if (*gen) return cmd_gen(cfg, dir);
        if (*train_cmd) return cmd_train(cfg, regime, checkpoint);
        if (*infer) return cmd_infer_dist(cfg, estimator, out);
        if (*sp) return cmd_superpix(cfg, out);
        if (*ev) return cmd_eval(cfg, checkpoint, oracle);
        if (*abl) return cmd_ablation(cfg);
        if (*t1) return cmd_table1(cfg, with_noadapt);
        if (*gc) return cmd_gradcheck(cfg, probes);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
