// ssmc: selective-SSM circuit toolkit. Subcommands generate IOI data, train
// toy models, run the intervention experiments, and emit their artifacts as
// CSV/SVG/JSON/DOT files with a manifest per run.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "ssmc/acdc.hpp"
#include "ssmc/analysis.hpp"
#include "ssmc/checkpoint.hpp"
#include "ssmc/eap.hpp"
#include "ssmc/graph.hpp"
#include "ssmc/io_util.hpp"
#include "ssmc/ioi.hpp"
#include "ssmc/metrics.hpp"
#include "ssmc/patching.hpp"
#include "ssmc/testbench.hpp"

using namespace ssmc;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string out_dir = "out";
    uint64_t seed = 0;
    int threads = 1;
};

struct DataOpts {
    std::string model_path;
    std::string sidecar;         // foreign checkpoint mapping
    std::string foreign_config;  // JSON model config for foreign checkpoints
    std::string data_path;
    std::string metric = "normalized_logit_diff";
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->add_option("--out", c.out_dir, "output directory");
    cmd->add_option("--seed", c.seed, "random seed recorded in the manifest");
    cmd->add_option("--threads", c.threads, "worker threads for per-example loops");
}

void add_model_data(CLI::App* cmd, DataOpts& d, bool need_metric = true) {
    cmd->add_option("--model", d.model_path, "model archive (safetensors)")->required();
    cmd->add_option("--sidecar", d.sidecar, "JSON sidecar mapping foreign tensor names");
    cmd->add_option("--foreign-config", d.foreign_config, "model config JSON for foreign checkpoints");
    cmd->add_option("--data", d.data_path, "prompt pairs (jsonl from gen-data)")->required();
    if (need_metric) cmd->add_option("--metric", d.metric, "metric name");
}

Model load_any_model(const DataOpts& d) {
    if (!fs::exists(d.model_path)) throw ConfigError("missing checkpoint: " + d.model_path);
    if (d.sidecar.empty()) return load_model(d.model_path);
    if (d.foreign_config.empty()) throw ConfigError("--sidecar requires --foreign-config");
    return load_checkpoint(d.model_path, d.sidecar, config_from_json(read_file(d.foreign_config)));
}

std::vector<PromptPair> load_pairs(const DataOpts& d) {
    if (!fs::exists(d.data_path)) throw ConfigError("missing dataset: " + d.data_path);
    return pairs_from_jsonl(read_file(d.data_path));
}

// every artifact is reproducible from its manifest: config values, hash, seed,
// library version, and the output list
struct RunManifest {
    json j;
    std::string dir;

    RunManifest(const std::string& command, CLI::App* cmd, const std::string& out_dir) : dir(out_dir) {
        j["command"] = command;
        j["version"] = ssmc_version();
        const std::string cfg = cmd->config_to_str(true, false);
        j["config"] = cfg;
        j["config_hash"] = fnv1a_hex(cfg);
        j["outputs"] = json::array();
    }
    void emit(const std::string& filename, const std::string& bytes) {
        atomic_write_file((fs::path(dir) / filename).string(), bytes);
        j["outputs"].push_back(filename);
    }
    void result(const std::string& key, const json& v) { j["results"][key] = v; }
    void finish() { atomic_write_file((fs::path(dir) / "manifest.json").string(), j.dump(2) + "\n"); }
};

std::string grid_csv(const GridResult& grid, const std::vector<std::string>& row_labels, bool flip,
                     const std::string& corner) {
    std::vector<std::vector<double>> rows = grid.values;
    if (flip) {
        for (auto& r : rows) {
            for (double& v : r) v = 1.0 - v;
        }
    }
    return csv_matrix(corner, grid.position_labels, row_labels, rows);
}

std::string grid_svg(const GridResult& grid, const std::vector<std::string>& row_labels, bool flip,
                     const std::string& title) {
    std::vector<std::vector<double>> rows = grid.values;
    double vmax = 1.0;
    for (auto& r : rows) {
        for (double& v : r) {
            if (flip) v = 1.0 - v;
            vmax = std::max(vmax, std::abs(v));
        }
    }
    return svg_heatmap(title, grid.position_labels, row_labels, rows, flip ? 0.0 : -vmax, flip ? vmax : vmax);
}

std::vector<std::string> layer_labels(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("layer" + std::to_string(i));
    return out;
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(CLI::App* cmd, const CommonOpts& common, int count, const std::string& templates_csv,
                 const std::string& classes_csv, const std::string& names_file) {
    Lexicon lex = Lexicon::defaults();
    if (!names_file.empty()) {
        lex.names.clear();
        std::istringstream in(read_file(names_file));
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) lex.names.push_back(line);
        }
    }
    Tokenizer tok = default_tokenizer(lex);
    GenOptions opt;
    opt.count = count;
    opt.seed = common.seed;
    if (!templates_csv.empty()) {
        opt.templates.clear();
        std::istringstream in(templates_csv);
        std::string t;
        while (std::getline(in, t, ',')) {
            auto id = template_from_name(t);
            if (!id) throw ConfigError("unknown template '" + t + "'");
            opt.templates.push_back(*id);
        }
    }
    if (!classes_csv.empty()) {
        opt.corruption_classes.clear();
        std::istringstream in(classes_csv);
        std::string c;
        while (std::getline(in, c, ',')) opt.corruption_classes.push_back(std::stoi(c));
    }
    auto pairs = generate_batch(tok, lex, opt);
    RunManifest man("gen-data", cmd, common.out_dir);
    man.emit("pairs.jsonl", pairs_to_jsonl(pairs));
    std::string vocab_txt;
    for (int64_t i = 0; i < tok.size(); ++i) vocab_txt += tok.word(i) + "\n";
    man.emit("vocab.txt", vocab_txt);
    man.result("count", pairs.size());
    man.result("seed", common.seed);
    man.finish();
    return 0;
}

int cmd_train_toy(CLI::App* cmd, const CommonOpts& common, ToyTaskSpec spec) {
    spec.seed = common.seed == 0 ? spec.seed : common.seed;
    TrainResult res = train_toy(spec);
    RunManifest man("train-toy", cmd, common.out_dir);
    man.j["results"]["final_accuracy"] = res.final_accuracy;
    man.j["results"]["steps"] = res.steps;
    {
        const std::string path = (fs::path(common.out_dir) / "model.safetensors").string();
        ensure_dir(common.out_dir);
        save_model(res.model, path);
        man.j["outputs"].push_back("model.safetensors");
    }
    man.emit("train_log.jsonl", train_log_jsonl(res.log));
    man.finish();
    std::cout << "trained to accuracy " << res.final_accuracy << " in " << res.steps << " steps\n";
    return 0;
}

int cmd_ablate_grid(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, const std::string& hook_family,
                    const std::string& mode) {
    Model m = load_any_model(d);
    auto pairs = load_pairs(d);
    auto ctxs = make_contexts(m, pairs);
    const MetricKind metric = metric_from_name(d.metric);
    GridResult grid;
    if (mode == "resample") {
        grid = ablation_grid(m, ctxs, hook_family, metric);
    } else if (mode == "zero" || mode == "mean") {
        // zero/mean ablation over the same (layer, position) grid
        MeanStore store;
        if (mode == "mean") {
            std::vector<std::string> hook_names;
            for (int l = 0; l < m.cfg.n_layers; ++l) {
                hook_names.push_back(hook_family == "out_proj" ? hooks::out_proj(l) : hooks::layer_input(l));
            }
            const char* cache_env = std::getenv("SSMC_CACHE_DIR");
            const std::string cache_dir = cache_env ? cache_env : ".ssmc-cache";
            const std::string key = fnv1a_hex(d.model_path + "|" + d.data_path + "|" + hook_family);
            const std::string cache_path = (fs::path(cache_dir) / ("means-" + key + ".safetensors")).string();
            if (fs::exists(cache_path)) {
                TensorArchive ar = TensorArchive::load(cache_path);
                store.means = std::move(ar.tensors);
            } else {
                store = build_mean_store(m, pairs, hook_names);
                TensorArchive ar;
                ar.tensors = store.means;
                ar.save(cache_path);
            }
        }
        if (hook_family == "h") throw ConfigError("zero/mean grids support layer_input and out_proj only");
        const int64_t L = ctxs.front().pair.seq_len();
        for (int layer = 0; layer < m.cfg.n_layers; ++layer) {
            std::vector<double> row;
            for (int64_t p = 0; p < L; ++p) {
                PatchPlan plan;
                Intervention iv;
                iv.hook = hook_family == "out_proj" ? hooks::out_proj(layer) : hooks::layer_input(layer);
                iv.mode = mode == "zero" ? PatchMode::zero : PatchMode::mean;
                iv.positions = PositionSel::at({p});
                plan.add(iv);
                row.push_back(run_with_plan(m, ctxs, plan, metric, mode == "mean" ? &store : nullptr).mean);
            }
            grid.values.push_back(std::move(row));
        }
        std::vector<std::string> labels(static_cast<size_t>(L));
        for (const auto& [lbl, p] : ctxs.front().pair.positions) labels[static_cast<size_t>(p)] = lbl;
        grid.position_labels = labels;
    } else {
        throw ConfigError("--mode must be resample, zero or mean");
    }
    const bool flip = metric == MetricKind::nld;
    RunManifest man("ablate-grid", cmd, common.out_dir);
    man.emit("grid.csv", grid_csv(grid, layer_labels(m.cfg.n_layers), flip, "layer\\position"));
    man.emit("grid.svg", grid_svg(grid, layer_labels(m.cfg.n_layers), flip,
                                  (flip ? "1 - " : "") + d.metric + " per (layer, position) patch at " + hook_family));
    man.result("display", flip ? "1 - " + d.metric : d.metric);
    man.result("hook_family", hook_family);
    man.result("mode", mode);
    man.finish();
    return 0;
}

int cmd_layer_removal(CLI::App* cmd, const CommonOpts& common, const DataOpts& d) {
    Model m = load_any_model(d);
    auto ctxs = make_contexts(m, load_pairs(d));
    const MetricKind metric = metric_from_name(d.metric);
    const auto curve = layer_removal_curve(m, ctxs, metric);
    const double clean = run_with_plan(m, ctxs, PatchPlan{}, metric).mean;
    GreedyRemovalResult greedy = greedy_layer_removal(m, ctxs, metric);

    std::ostringstream curve_csv;
    curve_csv << "layer," << d.metric << "\n";
    for (size_t l = 0; l < curve.size(); ++l) curve_csv << l << "," << curve[l] << "\n";
    std::ostringstream greedy_csv;
    greedy_csv << "step,removed_layer,metric_after\n";
    for (size_t s = 0; s < greedy.order.size(); ++s) {
        greedy_csv << s << "," << greedy.order[s].layer << "," << greedy.order[s].metric_after << "\n";
    }
    RunManifest man("layer-removal", cmd, common.out_dir);
    man.emit("removal_curve.csv", curve_csv.str());
    man.emit("greedy_removal.csv", greedy_csv.str());
    man.result("clean_metric", clean);
    man.finish();
    return 0;
}

int cmd_crosstalk(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, double target_frac) {
    Model m = load_any_model(d);
    auto pairs = load_pairs(d);
    const MetricKind metric = metric_from_name(d.metric);

    // one greedy run per (corruption, template) pair present in the data
    std::map<std::pair<int, TemplateId>, std::vector<PromptPair>> groups;
    for (const auto& p : pairs) groups[{p.corruption_id, p.template_id}].push_back(p);
    std::vector<int> layer_counts(static_cast<size_t>(m.cfg.n_layers), 0);
    json runs = json::array();
    for (const auto& [key, group] : groups) {
        auto ctxs = make_contexts(m, group);
        const double clean = run_with_plan(m, ctxs, PatchPlan{}, metric).mean;
        CrosstalkResult res = greedy_crosstalk_circuit(m, ctxs, metric, target_frac * clean);
        for (int l : res.circuit) layer_counts[static_cast<size_t>(l)]++;
        json jr;
        jr["corruption"] = key.first;
        jr["template"] = template_name(key.second);
        jr["circuit"] = res.circuit;
        jr["final_metric"] = res.final_metric;
        jr["target"] = res.target;
        jr["reached"] = res.reached;
        json log = json::array();
        for (const auto& step : res.log) log.push_back({{"layer", step.layer}, {"metric_after", step.metric_after}});
        jr["log"] = log;
        runs.push_back(jr);
    }
    std::ostringstream prop_csv;
    prop_csv << "layer,proportion_in_circuit\n";
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        prop_csv << l << "," << (groups.empty() ? 0.0 : static_cast<double>(layer_counts[static_cast<size_t>(l)]) /
                                                            static_cast<double>(groups.size()))
                 << "\n";
    }
    RunManifest man("crosstalk", cmd, common.out_dir);
    man.emit("circuits.json", runs.dump(2) + "\n");
    man.emit("layer_proportions.csv", prop_csv.str());
    man.result("groups", groups.size());
    man.finish();
    return 0;
}

int cmd_conv_slice(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, int layer) {
    Model m = load_any_model(d);
    auto ctxs = make_contexts(m, load_pairs(d));
    const MetricKind metric = metric_from_name(d.metric);
    GridResult grid = conv_slice_grid(m, ctxs, layer, metric);
    std::vector<std::string> taps;
    for (int tap = -static_cast<int>(m.cfg.conv_width - 1); tap <= 0; ++tap) {
        taps.push_back("tap" + std::to_string(tap));
    }
    const bool flip = metric == MetricKind::nld;
    RunManifest man("conv-slice", cmd, common.out_dir);
    man.emit("conv_slice_grid.csv", grid_csv(grid, taps, flip, "tap\\position"));
    man.emit("conv_slice_grid.svg",
             grid_svg(grid, taps, flip,
                      (flip ? "1 - " : "") + d.metric + " per conv-slice patch, layer " + std::to_string(layer)));
    man.result("layer", layer);
    man.result("display", flip ? "1 - " + d.metric : d.metric);
    man.finish();
    return 0;
}

int cmd_cosine_lens(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, int layer, int prompt_index) {
    Model m = load_any_model(d);
    auto pairs = load_pairs(d);
    if (prompt_index < 0 || prompt_index >= static_cast<int>(pairs.size())) {
        throw ConfigError("--prompt-index out of range");
    }
    const PromptPair& pair = pairs[static_cast<size_t>(prompt_index)];
    CosineLensMatrix lens = cosine_lens(m, pair.clean_tokens, layer);
    std::vector<std::string> labels(static_cast<size_t>(pair.seq_len()));
    for (const auto& [lbl, p] : pair.positions) labels[static_cast<size_t>(p)] = lbl;
    RunManifest man("cosine-lens", cmd, common.out_dir);
    man.emit("cosine_lens.csv", csv_matrix("contribution\\state", labels, labels, lens.values));
    man.emit("cosine_lens.svg",
             svg_heatmap("cosine(contribution_i, h_j), layer " + std::to_string(layer) + " (non-causal saliency)",
                         labels, labels, lens.values, -1.0, 1.0));
    man.result("layer", layer);
    man.result("non_causal", true);
    man.result("zero_norm_entries", lens.flagged_zero_norm);
    man.finish();
    return 0;
}

int cmd_steer_grid(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, int layer, int min_samples,
                   int eval_count) {
    Model m = load_any_model(d);
    auto pairs = load_pairs(d);
    Lexicon lex = Lexicon::defaults();
    Tokenizer tok = default_tokenizer(lex);
    NameAverageStore store = build_name_averages(m, pairs, layer, min_samples);
    const int n_eval = std::min<int>(eval_count, static_cast<int>(pairs.size()));
    auto ctxs = make_contexts(m, {pairs.begin(), pairs.begin() + n_eval});

    RunManifest man("steer-grid", cmd, common.out_dir);
    {
        ensure_dir(common.out_dir);
        const std::string path = (fs::path(common.out_dir) / "name_averages.safetensors").string();
        store.save(path);
        man.j["outputs"].push_back("name_averages.safetensors");
    }
    std::vector<std::string> slot_labels = {"n1", "n2", "n3", "n4", "n5"};
    for (SteerMethod method : {SteerMethod::replace, SteerMethod::subtract_add}) {
        SubstitutionGrid grid = substitution_grid(m, ctxs, store, method, lex, tok, common.seed);
        const std::string tag = method == SteerMethod::replace ? "replace" : "subtract_add";
        man.emit("steer_grid_" + tag + ".csv",
                 csv_matrix("source\\dest", slot_labels, slot_labels, grid.rate));
        man.emit("steer_grid_" + tag + ".svg",
                 svg_heatmap("steering success (" + tag + "), layer " + std::to_string(layer), slot_labels,
                             slot_labels, grid.rate, 0.0, 1.0));
        double n13 = 0.0;
        int cells = 0;
        for (int s = 0; s < 3; ++s) {
            for (int dd = 0; dd < 3; ++dd) {
                if (grid.attempts[static_cast<size_t>(s)][static_cast<size_t>(dd)] > 0) {
                    n13 += grid.rate[static_cast<size_t>(s)][static_cast<size_t>(dd)];
                    ++cells;
                }
            }
        }
        man.result(tag + "_n1_n3_mean", cells ? n13 / cells : 0.0);
    }
    man.result("excluded_entries", store.excluded.size());
    man.finish();
    return 0;
}

int cmd_eap(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, int ig_iters, double target, bool positional,
            bool signed_ranking, const std::string& grad_pass) {
    Model m = load_any_model(d);
    auto ctxs = make_contexts(m, load_pairs(d));
    CausalGraph g = CausalGraph::residual_only(m.cfg.n_layers);
    EapOptions opt;
    opt.metric = metric_from_name(d.metric);
    opt.iters = ig_iters;
    opt.positional = positional;
    opt.grad_pass = grad_pass == "clean" ? EapOptions::GradPass::clean : EapOptions::GradPass::fully_patched;
    AttributionTable table = eap(m, g, ctxs, opt);
    apply_scores(g, table);

    RunManifest man(positional ? "eap-pos" : "eap", cmd, common.out_dir);
    man.emit("attributions.json", table.to_json(g) + "\n");
    man.emit("adjacency.csv", table.to_csv_adjacency(g));
    if (target > 0.0) {
        MinimalEdgeSetResult res = minimal_edge_set(table, m, g, ctxs, opt.metric, target, signed_ranking);
        json kept = json::array();
        for (int id : res.kept) kept.push_back(g.edge_label(id));
        man.result("kept_edges", kept);
        man.result("k", res.k);
        man.result("achieved_metric", res.achieved);
        man.result("target", target);
        man.result("used_linear_scan", res.used_linear_scan);
        man.emit("circuit.json", g.to_json() + "\n");
        man.emit("circuit.dot", g.to_dot());
    }
    man.result("iters", ig_iters);
    man.finish();
    return 0;
}

int cmd_acdc(CLI::App* cmd, const CommonOpts& common, const DataOpts& d, double thresh, double target, int ig_iters,
             bool positional, const std::string& graph_path) {
    Model m = load_any_model(d);
    auto ctxs = make_contexts(m, load_pairs(d));
    const MetricKind metric = metric_from_name(d.metric);

    CausalGraph g = CausalGraph::with_intra(m.cfg.n_layers, static_cast<int>(m.cfg.conv_width));
    if (positional) g = g.positional_copy(ctxs.front().pair.seq_len());
    if (!graph_path.empty()) {
        g = CausalGraph::from_json(read_file(graph_path));
    } else if (target > 0.0) {
        // the usual pipeline: EAP scores, binary-searched minimal residual set,
        // then the sweep over that set plus the intra-layer edges
        CausalGraph residual = CausalGraph::residual_only(m.cfg.n_layers);
        EapOptions opt;
        opt.metric = metric;
        opt.iters = ig_iters;
        AttributionTable table = eap(m, residual, ctxs, opt);
        minimal_edge_set(table, m, residual, ctxs, metric, target);
        // copy kept/patched state onto the matching residual edges of g
        for (auto& e : g.edges()) {
            if (e.kind != EdgeKind::residual) continue;
            for (size_t i = 0; i < residual.edges().size(); ++i) {
                const Edge& re = residual.edges()[i];
                if (re.src == e.src && re.dst == e.dst && re.position == e.position) {
                    e.patched = re.patched;
                    e.score = table.scores[i];
                }
            }
        }
    }
    AcdcOptions aopt;
    aopt.metric = metric;
    aopt.thresh = thresh;
    AcdcResult res = acdc_sweep(g, m, ctxs, aopt);

    std::ostringstream rec_csv;
    rec_csv << "edge,baseline,with_edge,drop,removed\n";
    for (const auto& r : res.records) {
        rec_csv << "\"" << g.edge_label(r.edge) << "\"," << r.baseline << "," << r.with_edge << "," << r.drop << ","
                << (r.removed ? 1 : 0) << "\n";
    }
    RunManifest man("acdc", cmd, common.out_dir);
    man.emit("sweep_records.csv", rec_csv.str());
    man.emit("circuit.json", g.to_json() + "\n");
    man.emit("circuit.dot", g.to_dot());
    man.result("thresh", thresh);
    man.result("final_metric", res.final_metric);
    man.result("final_accuracy", res.final_accuracy);
    man.result("pruned_disconnected", res.pruned);
    man.finish();
    return 0;
}

int cmd_report(CLI::App* cmd, const CommonOpts& common, const std::string& dir) {
    (void)cmd;
    std::ostringstream md;
    md << "# Experiment report\n\n";
    std::vector<fs::path> manifests;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().filename() == "manifest.json") {
            manifests.push_back(entry.path());
        }
    }
    std::sort(manifests.begin(), manifests.end());
    for (const auto& path : manifests) {
        json man = json::parse(read_file(path.string()));
        const fs::path rel = fs::relative(path.parent_path(), dir);
        md << "## " << man.value("command", "?") << " (`" << rel.string() << "`)\n\n";
        if (man.contains("results")) {
            md << "results:\n\n```json\n" << man["results"].dump(2) << "\n```\n\n";
        }
        for (const auto& out : man.value("outputs", json::array())) {
            const std::string name = out.get<std::string>();
            md << "- [" << name << "](" << (rel / name).string() << ")\n";
        }
        md << "\n";
    }
    std::string html = "<!doctype html><html><body><pre>" + md.str() + "</pre></body></html>\n";
    atomic_write_file((fs::path(dir) / "index.md").string(), md.str());
    atomic_write_file((fs::path(dir) / "index.html").string(), html);
    (void)common;
    std::cout << "report written to " << (fs::path(dir) / "index.md").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective-SSM circuit toolkit"};
    app.require_subcommand(1);
    // TOML config with one [subcommand] section per command; flags override
    app.set_config("--config", "", "TOML config file ([subcommand] sections); flags override its values");

    CommonOpts common;
    DataOpts d;

    // gen-data
    int gen_count = 80;
    std::string gen_templates, gen_classes, gen_names_file;
    CLI::App* gen = app.add_subcommand("gen-data", "generate IOI prompt pairs");
    add_common(gen, common);
    gen->add_option("--count", gen_count, "number of pairs");
    gen->add_option("--templates", gen_templates, "comma-separated template names");
    gen->add_option("--classes", gen_classes, "comma-separated corruption classes (1-5)");
    gen->add_option("--names-file", gen_names_file, "newline-delimited name vocabulary override");

    // train-toy
    ToyTaskSpec spec;
    CLI::App* train = app.add_subcommand("train-toy", "train the toy IOI model");
    add_common(train, common);
    train->add_option("--steps", spec.max_steps, "max training steps");
    train->add_option("--batch", spec.batch_size, "batch size");
    train->add_option("--lr", spec.lr, "learning rate");
    train->add_option("--weight-decay", spec.weight_decay, "decoupled weight decay");
    train->add_option("--layers", spec.model_cfg.n_layers, "layer count");
    train->add_option("--d-model", spec.model_cfg.d_model, "residual width D");
    train->add_option("--d-inner", spec.model_cfg.d_inner, "inner width E");
    train->add_option("--state", spec.model_cfg.state_size, "SSM state size N");
    train->add_option("--conv", spec.model_cfg.conv_width, "conv width K");
    train->add_option("--vocab", spec.model_cfg.vocab_size, "vocab size");
    train->add_option("--target", spec.target_accuracy, "held-out accuracy target");
    train->add_option("--eval-every", spec.eval_every, "eval cadence");

    // ablate-grid
    std::string hook_family = "layer_input", ablate_mode = "resample";
    CLI::App* ablate = app.add_subcommand("ablate-grid", "(layer, position) resample ablation heatmap");
    add_common(ablate, common);
    add_model_data(ablate, d);
    ablate->add_option("--hook", hook_family, "layer_input | out_proj | h");
    ablate->add_option("--mode", ablate_mode, "resample | zero | mean");

    // layer-removal
    CLI::App* removal = app.add_subcommand("layer-removal", "zero-ablate layer outputs, one at a time plus greedily");
    add_common(removal, common);
    add_model_data(removal, d);

    // crosstalk
    double crosstalk_target = 0.9;
    CLI::App* crosstalk = app.add_subcommand("crosstalk", "greedy minimal cross-talk circuits");
    add_common(crosstalk, common);
    add_model_data(crosstalk, d);
    crosstalk->add_option("--target-frac", crosstalk_target, "stop at this fraction of the clean metric");

    // conv-slice
    int conv_layer = 0;
    CLI::App* conv = app.add_subcommand("conv-slice", "conv slice patch grid for one layer");
    add_common(conv, common);
    add_model_data(conv, d);
    conv->add_option("--layer", conv_layer, "layer index")->required();

    // cosine-lens
    int lens_layer = 0, prompt_index = 0;
    CLI::App* lens = app.add_subcommand("cosine-lens", "hidden-state cosine similarity lens (non-causal)");
    add_common(lens, common);
    add_model_data(lens, d, false);
    lens->add_option("--layer", lens_layer, "layer index")->required();
    lens->add_option("--prompt-index", prompt_index, "which pair's clean prompt to inspect");

    // steer-grid
    int steer_layer = 0, min_samples = 1, steer_eval = 50;
    CLI::App* steer = app.add_subcommand("steer-grid", "name-average steering and the 5x5 substitution grid");
    add_common(steer, common);
    add_model_data(steer, d, false);
    steer->add_option("--layer", steer_layer, "layer index")->required();
    steer->add_option("--min-samples", min_samples, "minimum samples per (name, slot)");
    steer->add_option("--eval-count", steer_eval, "pairs evaluated in the grid");

    // eap / eap-pos
    int ig_iters = 1;
    double eap_target = 0.85;
    bool signed_ranking = false;
    std::string grad_pass = "fully_patched";
    CLI::App* eap_cmd = app.add_subcommand("eap", "edge attribution patching + minimal edge set");
    add_common(eap_cmd, common);
    add_model_data(eap_cmd, d);
    eap_cmd->add_option("--ig", ig_iters, "integrated-gradient steps (1 = plain EAP)");
    eap_cmd->add_option("--target", eap_target, "binary-search metric target (0 disables)");
    eap_cmd->add_flag("--signed", signed_ranking, "rank by signed score instead of |score|");
    eap_cmd->add_option("--grad-pass", grad_pass, "fully_patched | clean");

    CLI::App* eap_pos = app.add_subcommand("eap-pos", "positional edge attribution patching");
    add_common(eap_pos, common);
    add_model_data(eap_pos, d);
    eap_pos->add_option("--ig", ig_iters, "integrated-gradient steps");
    eap_pos->add_option("--target", eap_target, "binary-search metric target (0 disables)");
    eap_pos->add_flag("--signed", signed_ranking, "rank by signed score");
    eap_pos->add_option("--grad-pass", grad_pass, "fully_patched | clean");

    // acdc
    double thresh = 1e-4;
    double acdc_target = 0.85;
    bool acdc_positional = false;
    std::string graph_path;
    CLI::App* acdc_cmd = app.add_subcommand("acdc", "threshold sweep over the causal graph");
    add_common(acdc_cmd, common);
    add_model_data(acdc_cmd, d);
    acdc_cmd->add_option("--thresh", thresh, "removal threshold on the metric drop");
    acdc_cmd->add_option("--target", acdc_target, "EAP minimal-set target before the sweep (0 skips)");
    acdc_cmd->add_option("--ig", ig_iters, "integrated-gradient steps for the EAP stage");
    acdc_cmd->add_flag("--positional", acdc_positional, "duplicate residual edges per token position");
    acdc_cmd->add_option("--graph", graph_path, "start from this circuit JSON instead of running EAP");

    // report
    std::string report_dir = ".";
    CLI::App* report = app.add_subcommand("report", "index all experiment artifacts in a directory");
    report->add_option("--dir", report_dir, "directory to scan")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 2;
    }

    try {
        global_threads() = std::max(1, common.threads);
        if (gen->parsed()) return cmd_gen_data(gen, common, gen_count, gen_templates, gen_classes, gen_names_file);
        if (train->parsed()) return cmd_train_toy(train, common, spec);
        if (ablate->parsed()) return cmd_ablate_grid(ablate, common, d, hook_family, ablate_mode);
        if (removal->parsed()) return cmd_layer_removal(removal, common, d);
        if (crosstalk->parsed()) return cmd_crosstalk(crosstalk, common, d, crosstalk_target);
        if (conv->parsed()) return cmd_conv_slice(conv, common, d, conv_layer);
        if (lens->parsed()) return cmd_cosine_lens(lens, common, d, lens_layer, prompt_index);
        if (steer->parsed()) return cmd_steer_grid(steer, common, d, steer_layer, min_samples, steer_eval);
        if (eap_cmd->parsed()) return cmd_eap(eap_cmd, common, d, ig_iters, eap_target, false, signed_ranking, grad_pass);
        if (eap_pos->parsed()) return cmd_eap(eap_pos, common, d, ig_iters, eap_target, true, signed_ranking, grad_pass);
        if (acdc_cmd->parsed())
            return cmd_acdc(acdc_cmd, common, d, thresh, acdc_target, ig_iters, acdc_positional, graph_path);
        if (report->parsed()) return cmd_report(report, common, report_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CLI::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
