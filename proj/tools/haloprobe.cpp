// haloprobe: command-line front end for the detection and mitigation kit.
//
// Every subcommand reads its inputs, runs one module pipeline and writes
// files. Options may come from a TOML config file (--config); flags win.
// Log verbosity comes from HALOPROBE_LOG (trace, debug, info, warn, error, off).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cli_io.hpp"
#include "haloprobe/balance.hpp"
#include "haloprobe/confounder.hpp"
#include "haloprobe/error.hpp"
#include "haloprobe/features.hpp"
#include "haloprobe/labeler.hpp"
#include "haloprobe/metrics.hpp"
#include "haloprobe/mitigation.hpp"
#include "haloprobe/mlp.hpp"
#include "haloprobe/pipeline.hpp"
#include "haloprobe/posterior.hpp"
#include "haloprobe/protocol.hpp"
#include "haloprobe/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace haloprobe;
using namespace haloprobe::cli;

namespace {

struct VocabOptions {
    std::optional<fs::path> synonyms;
    std::optional<fs::path> plurals;

    void add(CLI::App& app) {
        app.add_option("--synonyms", synonyms, "Synonym TSV (surface, category); builtin COCO table if unset")
            ->check(CLI::ExistingFile);
        app.add_option("--plurals", plurals, "Irregular plural TSV; builtin table if unset")
            ->check(CLI::ExistingFile);
    }
    ObjectVocabulary load() const { return ObjectVocabulary::load(synonyms, plurals); }
};

struct TrainOptions {
    DetectorTrainOptions detector;
    std::string prior_arch = "mlp16";
    std::string mask = "none";
    std::string backend = kernels::to_string(kernels::default_backend());
    bool no_balance = false;

    void add(CLI::App& app) {
        auto& t = detector.train;
        app.add_option("--epochs", t.epochs, "Training epochs for both estimators");
        app.add_option("--lr", t.learning_rate, "Adam learning rate");
        app.add_option("--weight-decay", t.weight_decay, "L2 weight decay on weights");
        app.add_option("--batch-size", t.batch_size, "Mini-batch size");
        app.add_option("--seed", t.seed, "Seed for initialization, shuffling and balancing");
        app.add_option("--hidden", detector.hidden, "Hidden width of the balanced estimator");
        app.add_option("--prior-arch", prior_arch, "Prior network: mlp16 or linear")
            ->check(CLI::IsMember({"mlp16", "linear"}));
        app.add_option("--position-width", detector.bins.position_width,
                       "Position bin width used for balancing");
        app.add_option("--max-len", detector.max_len, "Position normalizer (t / max_len)");
        app.add_flag("--no-balance", no_balance, "Train f on the unbalanced rows (ablation)");
        app.add_option("--mask", mask,
                       "Feature groups replaced by N(0,1) noise: none or a comma list of "
                       "attention, logits, external");
        app.add_option("--backend", backend, "Dense kernel backend: serial or openmp")
            ->check(CLI::IsMember({"serial", "openmp"}));
    }

    DetectorTrainOptions resolve() {
        auto d = detector;
        d.prior_arch = parse_prior_arch(prior_arch);
        d.mask = parse_feature_mask(mask, d.train.seed);
        d.balance = !no_balance;
        d.bins.max_len = d.max_len;
        d.backend = backend == "serial" ? kernels::Backend::serial : kernels::Backend::openmp;
        if (d.backend == kernels::Backend::openmp && !kernels::openmp_available()) {
            fail(ErrorKind::config, "this build has no OpenMP support");
        }
        d.train.check();
        return d;
    }
};

void set_log_level() {
    auto logger = spdlog::stderr_color_mt("haloprobe");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* env = std::getenv("HALOPROBE_LOG")) {
        const auto level = spdlog::level::from_str(env);
        // from_str maps unknown names to off; only accept real names.
        if (level != spdlog::level::off || std::string(env) == "off") {
            spdlog::set_level(level);
        } else {
            spdlog::warn("ignoring unknown HALOPROBE_LOG level '{}'", env);
        }
    }
}

void log_config(const CLI::App& sub, const std::string& seed) {
    spdlog::info("command: {}", sub.get_name());
    std::istringstream lines(sub.config_to_str(true, false));
    for (std::string line; std::getline(lines, line);) {
        if (!line.empty()) spdlog::info("  {}", line);
    }
    spdlog::info("seed: {}", seed);
}

// ---------------------------------------------------------------------------

int cmd_validate(const fs::path& traces, const std::optional<fs::path>& gt) {
    TraceReader reader(traces);
    std::size_t captions = 0, tokens = 0, mentions = 0;
    std::set<std::string> images;
    while (auto c = reader.next()) {
        ++captions;
        tokens += c->tokens.size();
        mentions += c->mentions.size();
        images.insert(c->image_id);
    }
    json summary{{"captions", captions},
                 {"tokens", tokens},
                 {"mentions", mentions},
                 {"layers", reader.header().layers},
                 {"heads", reader.header().heads},
                 {"feature_size", FeatureLayout(reader.header().layers, reader.header().heads)
                                      .balanced_size()}};
    if (gt) {
        const auto truth = load_ground_truth(*gt);
        std::size_t missing = 0;
        for (const auto& id : images) missing += truth.contains(id) ? 0 : 1;
        summary["ground_truth_images"] = truth.objects.size();
        summary["images_without_ground_truth"] = missing;
        if (missing > 0) spdlog::warn("{} images have no ground-truth entry", missing);
    }
    std::cout << summary.dump() << '\n';
    return 0;
}

int cmd_label(const fs::path& traces, const fs::path& gt, const VocabOptions& vocab,
              const fs::path& out) {
    auto corpus = read_traces(traces);
    const auto unaligned = label_corpus(corpus.captions, load_ground_truth(gt), vocab.load());
    std::size_t mentions = 0, halluc = 0;
    for (const auto& c : corpus.captions) {
        for (const auto& m : c.mentions) {
            ++mentions;
            halluc += m.label == ObjectLabel::hallucinated;
        }
    }
    write_traces(out, corpus);
    spdlog::info("labeled {} mentions ({} hallucinated, {} unaligned words) in {} captions",
                 mentions, halluc, unaligned, corpus.captions.size());
    return 0;
}

Dataset dataset_from_traces(const fs::path& traces, const std::optional<fs::path>& gt,
                            const VocabOptions& vocab, int max_len) {
    const auto corpus = load_corpus(traces, gt, vocab.load());
    auto d = assemble(corpus.captions, corpus.header, std::nullopt, {max_len});
    if (d.empty()) fail(ErrorKind::validation, "no object mentions found in " + traces.string());
    return d;
}

int cmd_featurize(const fs::path& traces, const std::optional<fs::path>& gt,
                  const VocabOptions& vocab, int max_len, const fs::path& out) {
    auto d = dataset_from_traces(traces, gt, vocab, max_len);
    if (std::ranges::any_of(d.labels, [](int y) { return y < 0; })) {
        spdlog::warn("dataset has unlabeled rows; pass --gt to label them");
    }
    save_dataset(out, d);
    spdlog::info("wrote {} rows of width {} to {}", d.size(), d.layout.balanced_size(),
                 out.string());
    return 0;
}

int cmd_balance(const fs::path& data, const BinConfig& bins, std::uint64_t seed,
                const fs::path& out, const std::optional<fs::path>& report_path) {
    const auto d = load_dataset(data);
    auto result = balance(d, bins, seed);
    save_dataset(out, result.dataset);
    if (report_path) write_json(*report_path, to_json(result.report));
    spdlog::info("balanced {} rows into {}; dropped {} single-class bins ({} rows)",
                 result.report.input_rows, result.report.output_rows,
                 result.report.dropped.size(), result.report.dropped_rows);
    return 0;
}

int cmd_train(const std::optional<fs::path>& data, const std::optional<fs::path>& traces,
              const std::optional<fs::path>& gt, const VocabOptions& vocab, TrainOptions& options,
              const fs::path& out, const std::optional<fs::path>& log_path) {
    auto resolved = options.resolve();
    Dataset d = data ? load_dataset(*data)
                     : dataset_from_traces(*traces, gt, vocab, resolved.max_len);
    auto result = train_detector(d, resolved);
    save_checkpoint(out, result.checkpoint);
    if (log_path) {
        json log{{"rows", d.size()}, {"fingerprint", result.checkpoint.fingerprint}};
        log["balanced"] = json::array();
        for (const auto& e : result.balanced_log) log["balanced"].push_back(to_json(e));
        log["prior"] = json::array();
        for (const auto& e : result.prior_log) log["prior"].push_back(to_json(e));
        log["balance"] = result.balance ? to_json(*result.balance) : json(nullptr);
        write_json(*log_path, log);
    }
    std::cout << json{{"checkpoint", out.string()}, {"sha256", sha256_file(out)}}.dump() << '\n';
    return 0;
}

int cmd_detect(const fs::path& checkpoint, const fs::path& traces,
               const std::optional<fs::path>& gt, const VocabOptions& vocab, double threshold,
               const fs::path& out, const std::optional<fs::path>& report_path,
               const std::optional<fs::path>& curves_dir) {
    const Detector detector(load_checkpoint(checkpoint), threshold);
    const auto corpus = load_corpus(traces, gt, vocab.load());
    if (!(corpus.header.layers == detector.checkpoint().layout.layers() &&
          corpus.header.heads == detector.checkpoint().layout.heads())) {
        fail(ErrorKind::validation, "trace L x H does not match the checkpoint");
    }
    const auto scores = score_tokens(corpus.captions, corpus.header, detector);
    write_scores(out, scores);

    const bool labeled =
        !scores.empty() && std::ranges::all_of(scores, [](const auto& s) { return s.label.has_value(); });
    if (labeled) {
        const auto report = detection_report(scores, threshold);
        const auto& m = report.overall;
        spdlog::info("n={} accuracy={:.4f} f1={:.4f} auroc={}", m.n, m.accuracy, m.f1,
                     m.auroc ? fmt::format("{:.4f}", *m.auroc) : m.auroc_note);
        if (report_path) write_json(*report_path, to_json(report));
        if (curves_dir) {
            ensure_directory(*curves_dir);
            std::ofstream roc(*curves_dir / "roc.csv"), pr(*curves_dir / "pr.csv");
            if (!roc || !pr) fail(ErrorKind::io, "cannot write curves to " + curves_dir->string());
            write_curve(roc, report.roc, "fpr", "tpr");
            write_curve(pr, report.pr, "recall", "precision");
        }
    } else if (report_path || curves_dir) {
        spdlog::warn("scores are unlabeled; no report or curves written (pass --gt)");
    }
    spdlog::info("scored {} mentions in {} captions", scores.size(), corpus.captions.size());
    return 0;
}

LayerRange resolve_layers(const std::string& text, int layers, LayerRange fallback) {
    LayerRange r = text.empty() ? fallback : parse_layer_range(text);
    if (r.begin < 0 || r.end > layers || r.begin >= r.end) {
        fail(ErrorKind::config, "layer range " + std::to_string(r.begin) + ":" +
                                    std::to_string(r.end) + " is outside 0:" +
                                    std::to_string(layers));
    }
    return r;
}

json curve_summary(const ConditionalCurve& curve, LayerRange layers) {
    const auto s = simpson_check(curve);
    return {{"layers", std::to_string(layers.begin) + ":" + std::to_string(layers.end)},
            {"marginal_mean_hallucinated", curve.marginal_mean[0]},
            {"marginal_mean_correct", curve.marginal_mean[1]},
            {"count_hallucinated", curve.total[0]},
            {"count_correct", curve.total[1]},
            {"simpson",
             {{"reversal", s.reversal},
              {"bins_halluc_ge_correct", s.bins_halluc_ge_correct},
              {"marginal_gap", s.marginal_gap},
              {"weighted_bin_sign", s.weighted_bin_sign},
              {"compared_bins", s.compared_bins}}}};
}

struct AnalyzeOptions {
    std::string layers;
    std::string early_layers;
    std::string late_layers;
    std::string occurrence = "any";
    int position_width = 10;
    int ngram = 2;
    bool plot_data = false;
};

int cmd_analyze(const fs::path& traces, const std::optional<fs::path>& gt,
                const VocabOptions& vocab, const AnalyzeOptions& o, const fs::path& out_dir) {
    const auto corpus = load_corpus(traces, gt, vocab.load());
    const int L = corpus.header.layers;
    const int third = (L + 2) / 3;
    const auto main_range = resolve_layers(o.layers, L, L >= 18 ? LayerRange{5, 18} : LayerRange{0, L});
    const auto early = resolve_layers(o.early_layers, L, {0, third});
    const auto late = resolve_layers(o.late_layers, L, {L - third, L});
    const auto occurrence = parse_occurrence_filter(o.occurrence);

    auto curve_for = [&](LayerRange r) {
        return attention_curve(corpus.captions, corpus.header, r, occurrence, o.position_width);
    };
    const auto curve = curve_for(main_range);
    const auto early_curve = curve_for(early);
    const auto late_curve = curve_for(late);
    const auto mentions = labeled_mentions(corpus.captions);
    const auto dists = class_conditional_dists(mentions, o.position_width);

    double re = 0, rep = 0, distinct = 0, span = 0, len = 0, vocab_size = 0;
    std::size_t counted = 0;
    for (const auto& c : corpus.captions) {
        std::vector<std::string> words;
        for (auto& w : split_words(c.caption_text)) words.push_back(std::move(w.text));
        const auto d = degeneration_metrics(words, o.ngram);
        if (!d.redundancy) continue;
        ++counted;
        re += *d.redundancy;
        rep += *d.repetition;
        distinct += *d.distinct;
        span += static_cast<double>(d.longest_repeated_span);
        len += static_cast<double>(d.length);
        vocab_size += static_cast<double>(d.vocab_size);
    }
    json degeneration = nullptr;
    if (counted > 0) {
        const double n = static_cast<double>(counted);
        degeneration = {{"n", o.ngram},         {"captions", counted},   {"length", len / n},
                        {"vocab", vocab_size / n}, {"redundancy", re / n}, {"repetition", rep / n},
                        {"distinct", distinct / n}, {"longest_repeated_span", span / n}};
    }

    json summary{{"mentions", mentions.size()},
                 {"attention", curve_summary(curve, main_range)},
                 {"early_attention", curve_summary(early_curve, early)},
                 {"late_attention", curve_summary(late_curve, late)},
                 {"repetition_hallucinated", dists.repetition[0]},
                 {"repetition_correct", dists.repetition[1]},
                 {"degeneration", degeneration}};
    ensure_directory(out_dir);
    write_json(out_dir / "summary.json", summary);
    if (o.plot_data) {
        std::ofstream c(out_dir / "attention_curve.csv"), e(out_dir / "attention_early_late.csv"),
            d(out_dir / "class_conditional.csv");
        if (!c || !e || !d) fail(ErrorKind::io, "cannot write plot data to " + out_dir.string());
        write_curve_csv(c, curve, "selected");
        write_curve_csv(e, early_curve, "early");
        write_curve_csv(e, late_curve, "late");
        write_dists_csv(d, dists);
    }
    std::cout << summary["attention"]["simpson"].dump() << '\n';
    return 0;
}

struct BeamOptions {
    BeamConfig beam;
    std::string generator;
    int timeout_ms = 30000;
    double threshold = kDefaultThreshold;
};

int cmd_score_beams(const fs::path& checkpoint, const VocabOptions& vocab, const BeamOptions& o,
                    const fs::path& out, const std::optional<fs::path>& trace_out) {
    const Detector detector(load_checkpoint(checkpoint), o.threshold);
    ChildProcessTransport transport(split_command(o.generator),
                                    std::chrono::milliseconds(o.timeout_ms));
    ProtocolGenerator generator(transport);
    if (!(generator.header().layers == detector.checkpoint().layout.layers() &&
          generator.header().heads == detector.checkpoint().layout.heads())) {
        fail(ErrorKind::protocol, "generator L x H does not match the checkpoint");
    }
    const auto result = guided_beam_search(generator, detector, vocab.load(), o.beam);
    write_json(out, to_json(result));
    if (trace_out) write_traces(*trace_out, {generator.header(), {result.caption}});
    if (result.error) fail(ErrorKind::protocol, "beam search stopped: " + *result.error);
    spdlog::info("{} rounds, {} tokens, ended={}", result.audit.size(),
                 result.caption.tokens.size(), result.ended);
    return 0;
}

int cmd_mark(const fs::path& checkpoint, const fs::path& traces, const std::optional<fs::path>& gt,
             const VocabOptions& vocab, double threshold, const std::string& marker,
             const fs::path& out) {
    const Detector detector(load_checkpoint(checkpoint), threshold);
    const auto corpus = load_corpus(traces, gt, vocab.load());
    std::vector<json> lines;
    std::size_t marked = 0;
    for (const auto& c : corpus.captions) {
        const auto scores = detector.score(c, corpus.header, c.mentions);
        json cats = json::array();
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (scores[i].predicted == ObjectLabel::hallucinated) cats.push_back(c.mentions[i].category);
        }
        marked += cats.size();
        lines.push_back({{"caption_id", c.caption_id},
                         {"image_id", c.image_id},
                         {"caption", c.caption_text},
                         {"marked", mark_hallucinations(c.caption_text, c.mentions, scores, marker)},
                         {"marked_categories", std::move(cats)}});
    }
    write_jsonl(out, lines);
    spdlog::info("marked {} mentions in {} captions", marked, lines.size());
    return 0;
}

int cmd_emit_edit(const fs::path& marked_path, const VocabOptions& vocab, const std::string& marker,
                  const fs::path& out, const std::optional<fs::path>& mock_out,
                  const std::optional<fs::path>& responses, const std::optional<fs::path>& edited_out) {
    const auto marked = read_jsonl(marked_path);
    std::vector<json> requests;
    std::vector<CaptionRecord> mock;
    const auto vocabulary = vocab.load();
    for (const auto& m : marked) {
        CaptionRecord r;
        std::string text;
        try {
            r.caption_id = m.at("caption_id").get<std::string>();
            r.image_id = m.at("image_id").get<std::string>();
            text = m.at("marked").get<std::string>();
        } catch (const json::exception& e) {
            fail(ErrorKind::validation, marked_path.string() + ": " + e.what());
        }
        auto req = to_json(emit_edit_request(text));
        req["caption_id"] = r.caption_id;
        req["image_id"] = r.image_id;
        requests.push_back(std::move(req));
        if (mock_out) {
            r.caption = parse_editor_response(mock_editor(text, vocabulary, marker));
            mock.push_back(std::move(r));
        }
    }
    write_jsonl(out, requests);
    if (mock_out) write_caption_records(*mock_out, mock);
    if (responses) {
        if (!edited_out) fail(ErrorKind::config, "--responses needs --edited-out");
        std::map<std::string, std::string> image_of;
        for (const auto& m : marked) image_of[m.at("caption_id")] = m.at("image_id");
        std::vector<CaptionRecord> edited;
        for (const auto& r : read_jsonl(*responses)) {
            const auto id = r.at("caption_id").get<std::string>();
            const auto it = image_of.find(id);
            if (it == image_of.end()) fail(ErrorKind::validation, "response for unknown caption " + id);
            edited.push_back({id, it->second, parse_editor_response(r.at("response").get<std::string>())});
        }
        write_caption_records(*edited_out, edited);
    }
    spdlog::info("emitted {} edit requests", requests.size());
    return 0;
}

int cmd_eval(const fs::path& pred, const fs::path& ref, const fs::path& gt, const VocabOptions& vocab,
             const std::string& averaging, const std::optional<fs::path>& out) {
    const auto truth = load_ground_truth(gt);
    const auto vocabulary = vocab.load();
    auto label_all = [&](const fs::path& path) {
        std::vector<LabeledCaption> labeled;
        for (const auto& r : read_caption_records(path)) {
            labeled.push_back(label_caption_text(r.caption_id, r.image_id, r.caption, truth, vocabulary));
        }
        return labeled;
    };
    const auto report = mitigation_report(label_all(ref), label_all(pred), truth,
                                          parse_f1_averaging(averaging));
    const auto j = to_json(report);
    if (out) write_json(*out, j);
    std::cout << j.dump() << '\n';
    return 0;
}

int cmd_synth(const std::string& spec_name, std::size_t n, std::uint64_t seed,
              const fs::path& out_dir) {
    auto spec = load_generator_spec(spec_name);
    const auto corpus = generate(spec, n, seed);
    ensure_directory(out_dir);
    write_traces(out_dir / "traces.jsonl", corpus.traces);
    save_ground_truth(out_dir / "groundtruth.json", corpus.truth);
    std::ofstream csv(out_dir / "posterior.csv");
    if (!csv) fail(ErrorKind::io, "cannot write " + (out_dir / "posterior.csv").string());
    write_posterior_csv(csv, corpus.posterior);
    write_json(out_dir / "spec.json", to_json(spec));
    spdlog::info("wrote {} captions with {} mentions to {}", corpus.traces.captions.size(),
                 corpus.posterior.size(), out_dir.string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    set_log_level();

    CLI::App app{"haloprobe: token-level object hallucination detection and mitigation"};
    app.option_defaults()->always_capture_default();
    app.set_config("--config", "", "TOML config file; command-line flags override it");
    app.require_subcommand(1);
    app.get_formatter()->column_width(36);

    VocabOptions vocab;
    std::optional<fs::path> traces, gt, data, out_opt, report, curves, log_out, trace_out;
    fs::path out, checkpoint, out_dir;
    std::function<int()> run;
    std::string seed_text = "none";

    auto* validate = app.add_subcommand("validate", "Check a trace file (and ground truth) for contract violations");
    validate->add_option("--traces", traces, "Trace JSONL")->required()->check(CLI::ExistingFile);
    validate->add_option("--gt", gt, "Ground-truth JSON (image id -> categories)")->check(CLI::ExistingFile);
    validate->callback([&] { run = [&] { return cmd_validate(*traces, gt); }; });

    auto* label = app.add_subcommand("label", "Align object words to tokens and label them against ground truth");
    label->add_option("--traces", traces, "Trace JSONL")->required()->check(CLI::ExistingFile);
    label->add_option("--gt", gt, "Ground-truth JSON")->required()->check(CLI::ExistingFile);
    label->add_option("--out", out, "Labeled trace JSONL")->required();
    vocab.add(*label);
    label->callback([&] { run = [&] { return cmd_label(*traces, *gt, vocab, out); }; });

    int max_len = kDefaultMaxLen;
    auto* featurize = app.add_subcommand("featurize", "Build the feature dataset (4LH+6 balanced input, 2 prior inputs)");
    featurize->add_option("--traces", traces, "Labeled trace JSONL")->required()->check(CLI::ExistingFile);
    featurize->add_option("--gt", gt, "Relabel against this ground truth first")->check(CLI::ExistingFile);
    featurize->add_option("--max-len", max_len, "Position normalizer (t / max_len)");
    featurize->add_option("--out", out, "Binary dataset file")->required();
    vocab.add(*featurize);
    featurize->callback([&] { run = [&] { return cmd_featurize(*traces, gt, vocab, max_len, out); }; });

    BinConfig bins;
    std::uint64_t seed = 0;
    auto* bal = app.add_subcommand("balance", "Upsample the minority class within each (position, repetition, first) bin");
    bal->add_option("--data", data, "Dataset from featurize")->required()->check(CLI::ExistingFile);
    bal->add_option("--position-width", bins.position_width, "Position bin width");
    bal->add_option("--max-len", bins.max_len, "Positions at or past this share the last bin");
    bal->add_option("--seed", seed, "Upsampling and shuffle seed");
    bal->add_option("--out", out, "Balanced dataset file")->required();
    bal->add_option("--report", report, "Per-bin counts before/after as JSON");
    bal->callback([&] {
        seed_text = std::to_string(seed);
        run = [&] { return cmd_balance(*data, bins, seed, out, report); };
    });

    TrainOptions train_opts;
    auto* train = app.add_subcommand("train", "Train the balanced estimator f and the prior g");
    auto* train_data = train->add_option("--data", data, "Dataset from featurize")->check(CLI::ExistingFile);
    auto* train_traces = train->add_option("--traces", traces, "Labeled trace JSONL (instead of --data)")
                             ->check(CLI::ExistingFile);
    train_data->excludes(train_traces);
    train->add_option("--gt", gt, "Relabel traces against this ground truth first")->check(CLI::ExistingFile);
    train->add_option("--out", out, "Checkpoint file")->required();
    train->add_option("--log", log_out, "Per-epoch losses and the balance report as JSON");
    train_opts.add(*train);
    vocab.add(*train);
    train->callback([&] {
        if (!data && !traces) throw CLI::RequiredError("--data or --traces");
        seed_text = std::to_string(train_opts.detector.train.seed);
        run = [&] { return cmd_train(data, traces, gt, vocab, train_opts, out, log_out); };
    });

    double threshold = kDefaultThreshold;
    auto* detect = app.add_subcommand("detect", "Score every object mention with p(correct) = combine(f, g)");
    detect->add_option("--checkpoint", checkpoint, "Checkpoint from train")->required()->check(CLI::ExistingFile);
    detect->add_option("--traces", traces, "Trace JSONL")->required()->check(CLI::ExistingFile);
    detect->add_option("--gt", gt, "Label mentions for the report")->check(CLI::ExistingFile);
    detect->add_option("--threshold", threshold, "Predict hallucinated when p(correct) < threshold");
    detect->add_option("--out", out, "Token scores JSONL")->required();
    detect->add_option("--report", report, "Accuracy, F1, AUROC overall and per position bin as JSON");
    detect->add_option("--curves", curves, "Directory for roc.csv and pr.csv");
    vocab.add(*detect);
    detect->callback([&] {
        run = [&] { return cmd_detect(checkpoint, *traces, gt, vocab, threshold, out, report, curves); };
    });

    AnalyzeOptions analyze_opts;
    auto* analyze = app.add_subcommand("analyze", "Confounder analysis: conditional attention curves, Simpson check, class-conditional tables");
    analyze->add_option("--traces", traces, "Labeled trace JSONL")->required()->check(CLI::ExistingFile);
    analyze->add_option("--gt", gt, "Relabel against this ground truth first")->check(CLI::ExistingFile);
    analyze->add_option("--layers", analyze_opts.layers, "Layer range a:b; default 5:18, or all layers when L < 18");
    analyze->add_option("--early-layers", analyze_opts.early_layers, "Early range; default first third");
    analyze->add_option("--late-layers", analyze_opts.late_layers, "Late range; default last third");
    analyze->add_option("--occurrence", analyze_opts.occurrence, "any, first or repeated")
        ->check(CLI::IsMember({"any", "first", "repeated"}));
    analyze->add_option("--position-width", analyze_opts.position_width, "Position bin width");
    analyze->add_option("--ngram", analyze_opts.ngram, "n for the degeneration metrics");
    analyze->add_flag("--plot-data", analyze_opts.plot_data, "Also write CSV tables for plotting");
    analyze->add_option("--out-dir", out_dir, "Output directory")->required();
    vocab.add(*analyze);
    analyze->callback([&] { run = [&] { return cmd_analyze(*traces, gt, vocab, analyze_opts, out_dir); }; });

    BeamOptions beam_opts;
    auto* beams = app.add_subcommand("score-beams", "Hallucination-aware beam search against a generator process");
    beams->add_option("--checkpoint", checkpoint, "Checkpoint from train")->required()->check(CLI::ExistingFile);
    beams->add_option("--generator", beam_opts.generator, "Generator command line (split on spaces)")->required();
    beams->add_option("--beams", beam_opts.beam.beams, "Candidates per round (N_beam)");
    beams->add_option("--temperature", beam_opts.beam.temperature, "Sampling temperature");
    beams->add_option("--beta", beam_opts.beam.beta, "Weight of correct mentions in S");
    beams->add_option("--segment-len", beam_opts.beam.segment_len, "New tokens per round (L_beam)");
    beams->add_option("--max-len", beam_opts.beam.max_len, "Caption length limit in tokens");
    beams->add_option("--session-id", beam_opts.beam.session_id, "Session id sent to the generator");
    beams->add_option("--image-id", beam_opts.beam.image_id, "Image id recorded with the caption");
    beams->add_option("--threshold", beam_opts.threshold, "Detector decision threshold");
    beams->add_option("--timeout-ms", beam_opts.timeout_ms, "Per-response timeout");
    beams->add_option("--out", out, "Result with per-round audit as JSON")->required();
    beams->add_option("--trace-out", trace_out, "Selected caption as a trace file");
    vocab.add(*beams);
    beams->callback([&] { run = [&] { return cmd_score_beams(checkpoint, vocab, beam_opts, out, trace_out); }; });

    std::string marker(kDefaultMarker);
    auto* mark = app.add_subcommand("mark", "Insert a marker before mentions predicted hallucinated");
    mark->add_option("--checkpoint", checkpoint, "Checkpoint from train")->required()->check(CLI::ExistingFile);
    mark->add_option("--traces", traces, "Trace JSONL")->required()->check(CLI::ExistingFile);
    mark->add_option("--gt", gt, "Relabel against this ground truth first")->check(CLI::ExistingFile);
    mark->add_option("--threshold", threshold, "Predict hallucinated when p(correct) < threshold");
    mark->add_option("--marker", marker, "Marker text");
    mark->add_option("--out", out, "Marked captions JSONL")->required();
    vocab.add(*mark);
    mark->callback([&] { run = [&] { return cmd_mark(checkpoint, *traces, gt, vocab, threshold, marker, out); }; });

    std::optional<fs::path> mock_out, responses, edited_out;
    auto* emit = app.add_subcommand("emit-edit", "Emit editing prompts for marked captions (and optionally run the mock editor)");
    emit->add_option("--marked", data, "Marked captions from mark")->required()->check(CLI::ExistingFile);
    emit->add_option("--marker", marker, "Marker text used by mark");
    emit->add_option("--out", out, "Edit requests JSONL")->required();
    emit->add_option("--mock-edit", mock_out, "Write captions edited by the built-in mock editor");
    emit->add_option("--responses", responses, "Editor replies JSONL (caption_id, response)")->check(CLI::ExistingFile);
    emit->add_option("--edited-out", edited_out, "Captions parsed from --responses");
    vocab.add(*emit);
    emit->callback([&] {
        run = [&] { return cmd_emit_edit(*data, vocab, marker, out, mock_out, responses, edited_out); };
    });

    fs::path pred, ref, gt_path;
    std::string averaging = "micro";
    auto* eval = app.add_subcommand("eval", "CHAIR and object F1 of mitigated captions against a baseline");
    eval->add_option("--pred", pred, "Mitigated captions (JSONL or trace file)")->required()->check(CLI::ExistingFile);
    eval->add_option("--ref", ref, "Baseline captions (JSONL or trace file)")->required()->check(CLI::ExistingFile);
    eval->add_option("--gt", gt_path, "Ground-truth JSON")->required()->check(CLI::ExistingFile);
    eval->add_option("--f1", averaging, "Object F1 averaging: micro or macro")
        ->check(CLI::IsMember({"micro", "macro"}));
    eval->add_option("--out", out_opt, "Report JSON");
    vocab.add(*eval);
    eval->callback([&] { run = [&] { return cmd_eval(pred, ref, gt_path, vocab, averaging, out_opt); }; });

    std::string spec_name = "default";
    std::size_t n_mentions = 2000;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with known posteriors");
    synth->add_option("--spec", spec_name, "default, confounded, unconfounded, separated or a JSON spec file");
    synth->add_option("--n", n_mentions, "Minimum number of object mentions");
    synth->add_option("--seed", seed, "Generator seed");
    synth->add_option("--out-dir", out_dir, "Writes traces.jsonl, groundtruth.json, posterior.csv, spec.json")->required();
    synth->callback([&] {
        seed_text = std::to_string(seed);
        run = [&] { return cmd_synth(spec_name, n_mentions, seed, out_dir); };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_code(ErrorKind::config);
    }

    try {
        for (const auto* sub : app.get_subcommands()) log_config(*sub, seed_text);
        return run();
    } catch (const Error& e) {
        spdlog::error("{} error: {}", to_string(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const json::exception& e) {
        spdlog::error("validation error: {}", e.what());
        return exit_code(ErrorKind::validation);
    } catch (const std::exception& e) {
        spdlog::error("unexpected error: {}", e.what());
        return 1;
    }
}
