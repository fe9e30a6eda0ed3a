#include "atm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "atm/io.hpp"
#include "atm/rng.hpp"
#include "atm/theory.hpp"

namespace fs = std::filesystem;

namespace atm::cli {

using nlohmann::json;

// -------------------- config --------------------

namespace {

MergeSchedule schedule_from_json(const json& j) {
    if (!j.is_object() || !j.contains("kind")) {
        throw ConfigError("schedule: expected an object with a `kind` key");
    }
    MergeSchedule s = MergeSchedule::from_kind_name(j["kind"].get<std::string>());
    switch (s.kind) {
        case ScheduleKind::LayerDependentThreshold:
            s.params.alpha = j.value("alpha", s.params.alpha);
            s.params.beta = j.value("beta", s.params.beta);
            s.params.theta_min = j.value("theta_min", s.params.theta_min);
            break;
        case ScheduleKind::ConstantThreshold:
            if (!j.contains("theta")) throw ConfigError("constant_threshold: missing `theta`");
            s.theta = j["theta"].get<double>();
            break;
        case ScheduleKind::ConstantTopR:
        case ScheduleKind::IncreasingTopR:
        case ScheduleKind::DecreasingTopR:
            if (!j.contains("r")) throw ConfigError(std::string(s.kind_name()) + ": missing `r`");
            s.r = j["r"].get<std::size_t>();
            break;
        case ScheduleKind::NoOp:
            break;
    }
    if (j.contains("only_layer")) s.only_layer = j["only_layer"].get<int>();
    s.validate();
    return s;
}

json schedule_to_json(const MergeSchedule& s) {
    json j{{"kind", s.kind_name()}};
    switch (s.kind) {
        case ScheduleKind::LayerDependentThreshold:
            j["alpha"] = s.params.alpha;
            j["beta"] = s.params.beta;
            j["theta_min"] = s.params.theta_min;
            break;
        case ScheduleKind::ConstantThreshold:
            j["theta"] = s.theta;
            break;
        case ScheduleKind::ConstantTopR:
        case ScheduleKind::IncreasingTopR:
        case ScheduleKind::DecreasingTopR:
            j["r"] = s.r;
            break;
        case ScheduleKind::NoOp:
            break;
    }
    if (s.only_layer) j["only_layer"] = *s.only_layer;
    return j;
}

bool is_synthetic_spec(const std::string& s) { return s.rfind("synthetic", 0) == 0; }

// "synthetic[:<seed>[:<count>]]"
void parse_synthetic_spec(const std::string& spec, std::uint64_t default_seed,
                          std::uint64_t& seed, std::size_t& count) {
    seed = default_seed;
    count = 1;
    try {
        std::stringstream ss(spec);
        std::string part;
        std::getline(ss, part, ':');
        if (std::getline(ss, part, ':')) seed = std::stoull(part);
        if (std::getline(ss, part, ':')) count = std::stoull(part);
    } catch (const std::exception&) {
        throw ConfigError("bad synthetic spec: " + spec);
    }
    if (count < 1) throw ConfigError("synthetic input spec: count must be >= 1");
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    try {
        const json j = json::parse(in);
        return from_json(j, fs::path(path).parent_path().string());
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
}

RunConfig RunConfig::from_json(const json& j, const std::string& base_dir) {
    RunConfig cfg;
    if (j.contains("model")) {
        const json& m = j["model"];
        cfg.model.depth = m.value("depth", cfg.model.depth);
        cfg.model.dim = m.value("dim", cfg.model.dim);
        cfg.model.heads = m.value("heads", cfg.model.heads);
        cfg.model.mlp_ratio = m.value("mlp_ratio", cfg.model.mlp_ratio);
        cfg.model.image_size = m.value("image_size", cfg.model.image_size);
        cfg.model.patch_size = m.value("patch_size", cfg.model.patch_size);
        cfg.model.use_cls_token = m.value("use_cls_token", cfg.model.use_cls_token);
        cfg.model.proportional_attention =
            m.value("proportional_attention", cfg.model.proportional_attention);
        cfg.model.final_layer_cls_only =
            m.value("final_layer_cls_only", cfg.model.final_layer_cls_only);
        cfg.model.splitting_depth = m.value("splitting_depth", cfg.model.splitting_depth);
        cfg.model.num_classes = m.value("num_classes", cfg.model.num_classes);
        cfg.model.seed = m.value("seed", cfg.model.seed);
    }
    cfg.model.validate();

    cfg.weights_spec = j.value("weights", cfg.weights_spec);
    if (j.contains("schedule")) cfg.schedule = schedule_from_json(j["schedule"]);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    cfg.outputs = j.value("outputs", cfg.outputs);
    if (j.contains("emit")) {
        const json& e = j["emit"];
        cfg.emit.trace = e.value("trace", cfg.emit.trace);
        cfg.emit.cost = e.value("cost", cfg.emit.cost);
        cfg.emit.token_maps = e.value("token_maps", cfg.emit.token_maps);
        cfg.emit.records = e.value("records", cfg.emit.records);
    }

    if (j.contains("inputs")) {
        for (const auto& entry : j["inputs"]) {
            std::string spec = entry.get<std::string>();
            if (!is_synthetic_spec(spec)) {
                fs::path p(spec);
                if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
                if (!fs::exists(p)) {
                    throw ConfigError("input path does not resolve: " + spec);
                }
                spec = p.string();
            }
            cfg.inputs.push_back(std::move(spec));
        }
    }
    if (!is_synthetic_spec(cfg.weights_spec)) {
        fs::path p(cfg.weights_spec);
        if (p.is_relative() && !base_dir.empty()) p = fs::path(base_dir) / p;
        if (!fs::exists(p)) {
            throw ConfigError("weights path does not resolve: " + cfg.weights_spec);
        }
        cfg.weights_spec = p.string();
    }
    return cfg;
}

json RunConfig::to_json() const {
    return json{{"model",
                 {{"depth", model.depth},
                  {"dim", model.dim},
                  {"heads", model.heads},
                  {"mlp_ratio", model.mlp_ratio},
                  {"image_size", model.image_size},
                  {"patch_size", model.patch_size},
                  {"use_cls_token", model.use_cls_token},
                  {"proportional_attention", model.proportional_attention},
                  {"final_layer_cls_only", model.final_layer_cls_only},
                  {"splitting_depth", model.splitting_depth},
                  {"num_classes", model.num_classes},
                  {"seed", model.seed}}},
                {"weights", weights_spec},
                {"schedule", schedule_to_json(schedule)},
                {"inputs", inputs},
                {"batch_size", batch_size},
                {"outputs", outputs},
                {"emit",
                 {{"trace", emit.trace},
                  {"cost", emit.cost},
                  {"token_maps", emit.token_maps},
                  {"records", emit.records}}}};
}

// -------------------- records --------------------

void RecordWriter::emit(const json& record) {
    (*out_) << record.dump() << "\n";
    if (record.value("type", "") == "error") any_error_ = true;
}

void RecordWriter::emit_error(const std::string& category, const std::string& message) {
    emit(json{{"type", "error"}, {"category", category}, {"message", message}});
}

namespace {

json layer_record_json(const LayerRecord& r, std::size_t batch_index) {
    json j{{"type", "layer"},          {"batch", batch_index},
           {"layer", r.layer},         {"tokens_before", r.tokens_before},
           {"tokens_after", r.tokens_after}, {"r", r.r},
           {"pairs", r.pair_count},    {"strategy", r.strategy},
           {"cls_drop", r.cls_drop}};
    if (r.theta) j["theta"] = *r.theta;
    return j;
}

json cost_record_json(const CostReport& c, std::size_t batch_index) {
    return json{{"type", "cost"},
                {"batch", batch_index},
                {"gflops", c.gflops()},
                {"baseline_gflops", c.baseline_gflops()},
                {"reduction_pct", c.reduction_pct()},
                {"embed_flops", c.embed_flops},
                {"head_flops", c.head_flops},
                {"total_flops", c.total_flops},
                {"baseline_flops", c.baseline_flops}};
}

void write_cost_csv(std::ostream& out, const CostReport& c) {
    out << "layer,n_attn,n_mlp,attn_flops,mlp_flops\n";
    for (const auto& lc : c.layers) {
        out << lc.layer << "," << lc.n_attn << "," << lc.n_mlp << "," << lc.attn_flops << ","
            << lc.mlp_flops << "\n";
    }
    out << "embed,,," << c.embed_flops << ",\n";
    out << "head,,," << c.head_flops << ",\n";
    out << "total,,," << c.total_flops << ",\n";
}

}  // namespace

// -------------------- inputs --------------------

ModelWeights resolve_weights(const RunConfig& cfg) {
    if (is_synthetic_spec(cfg.weights_spec)) {
        std::uint64_t seed = cfg.model.seed;
        std::size_t count = 1;
        parse_synthetic_spec(cfg.weights_spec, cfg.model.seed, seed, count);
        return ModelWeights::synthetic(cfg.model, seed);
    }
    return io::load_weights(cfg.weights_spec, cfg.model);
}

namespace {

Image synthetic_image(const ModelConfig& cfg, std::uint64_t seed) {
    Image img;
    img.height = cfg.image_size;
    img.width = cfg.image_size;
    img.data.resize(static_cast<std::size_t>(cfg.image_size) * cfg.image_size * 3);
    Rng rng(seed);
    for (auto& v : img.data) v = static_cast<float>(rng.next_unit());
    return img;
}

std::vector<TokenBatch> split_singles(TokenBatch batch) {
    std::vector<TokenBatch> singles;
    for (std::size_t img = 0; img < batch.batch_size(); ++img) {
        TokenBatch one;
        one.activations.push_back(std::move(batch.activations[img]));
        one.merging_sizes.push_back(std::move(batch.merging_sizes[img]));
        one.provenance.push_back(std::move(batch.provenance[img]));
        one.cls_index = batch.cls_index;
        one.original_tokens = batch.original_tokens;
        singles.push_back(std::move(one));
    }
    return singles;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

std::vector<TokenBatch> load_input_pool(const RunConfig& cfg, const ModelWeights& w) {
    if (cfg.inputs.empty()) {
        throw ConfigError("no inputs configured");
    }
    std::vector<TokenBatch> pool;
    for (const std::string& spec : cfg.inputs) {
        if (is_synthetic_spec(spec)) {
            std::uint64_t seed = cfg.model.seed;
            std::size_t count = 1;
            parse_synthetic_spec(spec, cfg.model.seed, seed, count);
            for (std::size_t i = 0; i < count; ++i) {
                const Image img = synthetic_image(cfg.model, Rng::derive(seed, i));
                pool.push_back(patch_embed(img, cfg.model, w));
            }
        } else if (ends_with(spec, ".ppm")) {
            pool.push_back(patch_embed(io::load_image_ppm(spec), cfg.model, w));
        } else {
            for (auto& one : split_singles(io::load_token_dump(spec, cfg.model.use_cls_token))) {
                pool.push_back(std::move(one));
            }
        }
    }
    for (const auto& one : pool) {
        if (one.token_count() != pool.front().token_count() || one.dim() != pool.front().dim() ||
            one.original_tokens != pool.front().original_tokens) {
            throw ConfigError("inputs disagree on token geometry; one pool must be uniform");
        }
        if (one.dim() != static_cast<std::size_t>(cfg.model.dim)) {
            throw ConfigError("input token dim does not match the model");
        }
    }
    return pool;
}

std::vector<TokenBatch> rebatch(const std::vector<TokenBatch>& singles, std::size_t batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    std::vector<TokenBatch> batches;
    for (std::size_t at = 0; at < singles.size(); at += batch_size) {
        TokenBatch batch = singles[at];
        const std::size_t end = std::min(singles.size(), at + batch_size);
        for (std::size_t i = at + 1; i < end; ++i) {
            batch.activations.push_back(singles[i].activations[0]);
            batch.merging_sizes.push_back(singles[i].merging_sizes[0]);
            batch.provenance.push_back(singles[i].provenance[0]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

// -------------------- schedule evaluation & tuning --------------------

namespace {

struct EvalOut {
    double reduction = 0.0;  // fraction in [0, 1)
    double gflops = 0.0;
    double baseline_gflops = 0.0;
    std::vector<double> merges_per_layer;
};

EvalOut eval_schedule(const MergeSchedule& s, const ModelConfig& mc, const ModelWeights& w,
                      const std::vector<TokenBatch>& batches) {
    EvalOut out;
    std::uint64_t total = 0, baseline = 0;
    std::size_t images = 0;
    for (const auto& batch : batches) {
        const std::size_t n_img = batch.batch_size();
        const ForwardResult res = forward(batch, mc, w, s);
        const CostReport cost = trace_flops(res.trace, mc);
        total += cost.total_flops * n_img;
        baseline += cost.baseline_flops * n_img;
        if (out.merges_per_layer.empty()) out.merges_per_layer.assign(res.trace.layers.size(), 0.0);
        for (std::size_t l = 0; l < res.trace.layers.size(); ++l) {
            out.merges_per_layer[l] +=
                static_cast<double>(res.trace.layers[l].r) * static_cast<double>(n_img);
        }
        images += n_img;
    }
    for (auto& m : out.merges_per_layer) m /= static_cast<double>(images);
    out.reduction = 1.0 - static_cast<double>(total) / static_cast<double>(baseline);
    out.gflops = static_cast<double>(total) / static_cast<double>(images) * 1e-9;
    out.baseline_gflops = static_cast<double>(baseline) / static_cast<double>(images) * 1e-9;
    return out;
}

constexpr double kTuneTolerance = 0.01;  // +/-1% of the FLOPs-reduction target
constexpr int kMaxBisectIterations = 40;

}  // namespace

ScheduleRow tune_schedule(ScheduleKind kind, double target, const RunConfig& cfg,
                          const ModelWeights& w, const std::vector<TokenBatch>& batches) {
    if (!(target > 0.0) || !(target < 1.0)) {
        throw ConfigError("target reduction must lie in (0, 1)");
    }

    ThresholdParams base_params =
        cfg.schedule.kind == ScheduleKind::LayerDependentThreshold ? cfg.schedule.params
                                                                   : ThresholdParams{};
    auto make = [&](double param) {
        switch (kind) {
            case ScheduleKind::LayerDependentThreshold: {
                ThresholdParams p = base_params;
                p.theta_min = param;
                return MergeSchedule::layer_dependent(p);
            }
            case ScheduleKind::ConstantThreshold:
                return MergeSchedule::constant_threshold(param);
            case ScheduleKind::ConstantTopR:
                return MergeSchedule::constant_top_r(static_cast<std::size_t>(param));
            case ScheduleKind::IncreasingTopR:
                return MergeSchedule::increasing_top_r(static_cast<std::size_t>(param));
            case ScheduleKind::DecreasingTopR:
                return MergeSchedule::decreasing_top_r(static_cast<std::size_t>(param));
            default:
                throw ConfigError("tune_schedule: no_op has no free parameter");
        }
    };

    ScheduleRow row;
    row.param_name = (kind == ScheduleKind::LayerDependentThreshold) ? "theta_min"
                     : (kind == ScheduleKind::ConstantThreshold)     ? "theta"
                                                                     : "r";

    auto finish = [&](double param, const EvalOut& ev) {
        row.schedule = make(param);
        row.param_value = param;
        row.gflops = ev.gflops;
        row.baseline_gflops = ev.baseline_gflops;
        row.reduction_pct = ev.reduction * 100.0;
        row.merges_per_layer = ev.merges_per_layer;
        row.target_met = std::abs(ev.reduction - target) <= kTuneTolerance;
        return row;
    };

    const bool continuous = kind == ScheduleKind::LayerDependentThreshold ||
                            kind == ScheduleKind::ConstantThreshold;
    if (continuous) {
        double lo = 1e-6;  // maximal merging
        double hi = kind == ScheduleKind::LayerDependentThreshold ? base_params.alpha : 1.0;
        EvalOut at_lo = eval_schedule(make(lo), cfg.model, w, batches);
        if (at_lo.reduction < target - kTuneTolerance) {
            row.feasible = false;
            return finish(lo, at_lo);
        }
        double best_param = lo;
        EvalOut best = at_lo;
        for (int it = 0; it < kMaxBisectIterations; ++it) {
            const double mid = 0.5 * (lo + hi);
            const EvalOut ev = eval_schedule(make(mid), cfg.model, w, batches);
            if (std::abs(ev.reduction - target) < std::abs(best.reduction - target)) {
                best = ev;
                best_param = mid;
            }
            if (std::abs(ev.reduction - target) <= kTuneTolerance) {
                return finish(mid, ev);
            }
            if (ev.reduction > target) {
                lo = mid;  // merging too aggressive: raise the threshold floor
            } else {
                hi = mid;
            }
        }
        return finish(best_param, best);
    }

    // integer-parameter schedules: monotone binary search, then the closest
    // of the two straddling values
    const std::size_t n0 = batches.front().token_count();
    const std::size_t r_max = n0 / 2 + static_cast<std::size_t>(cfg.model.depth);
    std::map<std::size_t, EvalOut> cache;
    auto eval_r = [&](std::size_t r) -> const EvalOut& {
        auto it = cache.find(r);
        if (it == cache.end()) {
            it = cache.emplace(r, eval_schedule(make(static_cast<double>(r)), cfg.model, w, batches))
                     .first;
        }
        return it->second;
    };

    if (eval_r(r_max).reduction < target - kTuneTolerance) {
        row.feasible = false;
        return finish(static_cast<double>(r_max), eval_r(r_max));
    }
    std::size_t lo = 0, hi = r_max;  // invariant: red(lo) < target <= red(hi)
    if (eval_r(0).reduction >= target) {
        hi = 0;
    } else {
        while (hi - lo > 1) {
            const std::size_t mid = lo + (hi - lo) / 2;
            if (eval_r(mid).reduction >= target) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    std::size_t pick = hi;
    if (hi > 0) {
        const double err_hi = std::abs(eval_r(hi).reduction - target);
        const double err_lo = std::abs(eval_r(hi - 1).reduction - target);
        if (err_lo < err_hi) pick = hi - 1;
    }
    return finish(static_cast<double>(pick), eval_r(pick));
}

// -------------------- commands --------------------

namespace {

int guard(RecordWriter& rec, const std::function<int()>& body) {
    try {
        const int code = body();
        return rec.any_error() ? 1 : code;
    } catch (const Error& e) {
        rec.emit_error(e.category(), e.what());
        std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        rec.emit_error("internal", e.what());
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
}

std::ofstream open_out_file(const std::string& dir, const std::string& name) {
    fs::create_directories(dir);
    std::ofstream out(fs::path(dir) / name, std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + (fs::path(dir) / name).string());
    return out;
}

}  // namespace

int cmd_run(const RunConfig& cfg, const std::string& out_dir) {
    std::ofstream records = open_out_file(out_dir, "records.jsonl");
    RecordWriter rec(records);
    return guard(rec, [&]() {
        const ModelWeights w = resolve_weights(cfg);
        const auto singles = load_input_pool(cfg, w);
        const auto batches = rebatch(singles, cfg.batch_size);

        std::ofstream trace_out;
        if (cfg.emit.trace) trace_out = open_out_file(out_dir, "trace.jsonl");
        if (cfg.emit.token_maps) fs::create_directories(fs::path(out_dir) / "maps");

        std::uint64_t total = 0, baseline = 0;
        std::size_t images = 0;
        CostReport first_cost;
        std::size_t image_index = 0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const ForwardResult res = forward(batches[bi], cfg.model, w, cfg.schedule);
            const CostReport cost = trace_flops(res.trace, cfg.model);
            if (bi == 0) first_cost = cost;

            for (const auto& lr : res.trace.layers) {
                const json j = layer_record_json(lr, bi);
                if (cfg.emit.records) rec.emit(j);
                if (cfg.emit.trace) trace_out << j.dump() << "\n";
            }
            if (cfg.emit.cost && cfg.emit.records) rec.emit(cost_record_json(cost, bi));

            if (cfg.emit.token_maps) {
                if (res.tokens.original_tokens ==
                        static_cast<std::size_t>(cfg.model.num_tokens()) &&
                    !res.tokens.cls_only) {
                    for (std::size_t i = 0; i < res.tokens.batch_size(); ++i) {
                        char name[32];
                        std::snprintf(name, sizeof(name), "maps/img%04zu.ppm", image_index + i);
                        const std::size_t remaining = io::render_token_map(
                            res.tokens, i, cfg.model.grid_side(), cfg.model.seed,
                            (fs::path(out_dir) / name).string());
                        rec.emit(json{{"type", "token_map"},
                                      {"image", image_index + i},
                                      {"remaining", remaining},
                                      {"path", name}});
                    }
                } else {
                    rec.emit(json{{"type", "warning"},
                                  {"message", "token maps need image-geometry inputs"}});
                }
            }

            total += cost.total_flops * batches[bi].batch_size();
            baseline += cost.baseline_flops * batches[bi].batch_size();
            images += batches[bi].batch_size();
            image_index += batches[bi].batch_size();
        }

        if (cfg.emit.cost) {
            std::ofstream csv = open_out_file(out_dir, "cost.csv");
            write_cost_csv(csv, first_cost);
        }

        const double mean_gflops = static_cast<double>(total) / static_cast<double>(images) * 1e-9;
        const double reduction =
            baseline == 0 ? 0.0
                          : 100.0 * (1.0 - static_cast<double>(total) / static_cast<double>(baseline));
        const json summary{{"type", "summary"},
                           {"images", images},
                           {"batches", batches.size()},
                           {"schedule", cfg.schedule.kind_name()},
                           {"mean_gflops", mean_gflops},
                           {"reduction_pct", reduction}};
        rec.emit(summary);
        std::ofstream summary_out = open_out_file(out_dir, "summary.json");
        summary_out << summary.dump(2) << "\n";
        return 0;
    });
}

int cmd_flops(const RunConfig& cfg, const std::optional<std::string>& trace_path,
              const std::string& out_dir) {
    std::ofstream records = open_out_file(out_dir, "records.jsonl");
    RecordWriter rec(records);
    return guard(rec, [&]() {
        CostReport report;
        if (trace_path) {
            std::ifstream in(*trace_path);
            if (!in) throw ConfigError("cannot open trace " + *trace_path);
            Trace trace;
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const json j = json::parse(line);
                if (j.value("type", "") != "layer" || j.value("batch", 0) != 0) continue;
                LayerRecord lr;
                lr.layer = j["layer"].get<int>();
                lr.tokens_before = j["tokens_before"].get<std::size_t>();
                lr.tokens_after = j["tokens_after"].get<std::size_t>();
                trace.layers.push_back(lr);
            }
            report = trace_flops(trace, cfg.model);
        } else {
            report = baseline_cost(cfg.model);
        }
        rec.emit(cost_record_json(report, 0));
        std::ofstream csv = open_out_file(out_dir, "cost.csv");
        write_cost_csv(csv, report);
        std::cout << "gflops=" << report.gflops() << " baseline=" << report.baseline_gflops()
                  << " reduction=" << report.reduction_pct() << "%\n";
        return 0;
    });
}

int cmd_compare_schedules(const RunConfig& cfg, double target, const std::string& out_dir) {
    std::ofstream records = open_out_file(out_dir, "records.jsonl");
    RecordWriter rec(records);
    return guard(rec, [&]() {
        const ModelWeights w = resolve_weights(cfg);
        const auto singles = load_input_pool(cfg, w);
        const auto batches = rebatch(singles, cfg.batch_size);

        const ScheduleKind kinds[] = {
            ScheduleKind::LayerDependentThreshold, ScheduleKind::ConstantThreshold,
            ScheduleKind::ConstantTopR, ScheduleKind::IncreasingTopR,
            ScheduleKind::DecreasingTopR};

        std::ofstream csv = open_out_file(out_dir, "schedules.csv");
        csv << "schedule,param_name,param_value,gflops,reduction_pct,target_met\n";

        for (ScheduleKind kind : kinds) {
            const ScheduleRow row = tune_schedule(kind, target, cfg, w, batches);
            if (!row.feasible) {
                rec.emit_error("infeasible",
                               std::string(row.schedule.kind_name()) +
                                   ": even maximal merging reaches only " +
                                   std::to_string(row.reduction_pct) + "% reduction");
            }
            rec.emit(json{{"type", "schedule_row"},
                          {"schedule", row.schedule.kind_name()},
                          {"param_name", row.param_name},
                          {"param_value", row.param_value},
                          {"gflops", row.gflops},
                          {"baseline_gflops", row.baseline_gflops},
                          {"reduction_pct", row.reduction_pct},
                          {"target_met", row.target_met},
                          {"feasible", row.feasible}});
            for (std::size_t l = 0; l < row.merges_per_layer.size(); ++l) {
                rec.emit(json{{"type", "layer_merges"},
                              {"schedule", row.schedule.kind_name()},
                              {"layer", l + 1},
                              {"merged", row.merges_per_layer[l]}});
            }
            csv << row.schedule.kind_name() << "," << row.param_name << "," << row.param_value
                << "," << row.gflops << "," << row.reduction_pct << ","
                << (row.target_met ? 1 : 0) << "\n";
        }
        return 0;
    });
}

std::vector<double> default_alpha_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 11; ++i) g.push_back(0.945 + 0.005 * i);
    return g;
}

std::vector<double> default_beta_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 7; ++i) g.push_back(0.015 + 0.005 * i);
    return g;
}

std::vector<double> default_theta_min_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 29; ++i) g.push_back(0.800 + 0.005 * i);
    return g;
}

namespace {

std::string sweep_key(double alpha, double beta, double theta_min) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3f|%.3f|%.3f", alpha, beta, theta_min);
    return buf;
}

}  // namespace

int cmd_sweep(const RunConfig& cfg, const std::vector<double>& alphas,
              const std::vector<double>& betas, const std::vector<double>& theta_mins,
              const std::string& out_dir, int workers) {
    fs::create_directories(out_dir);
    const fs::path sweep_path = fs::path(out_dir) / "sweep.jsonl";

    // resume: collect keys already present
    std::set<std::string> done;
    if (fs::exists(sweep_path)) {
        std::ifstream in(sweep_path);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            try {
                const json j = json::parse(line);
                if (j.value("type", "") == "sweep_point") done.insert(j.value("key", ""));
            } catch (const json::exception&) {
                // ignore a torn trailing line from an interrupted run
            }
        }
    }

    std::ofstream out(sweep_path, std::ios::app);
    RecordWriter rec(out);
    return guard(rec, [&]() {
        const ModelWeights w = resolve_weights(cfg);
        const auto singles = load_input_pool(cfg, w);
        const auto batches = rebatch(singles, cfg.batch_size);

        struct Point {
            double alpha, beta, theta_min;
            std::string key;
        };
        std::vector<Point> points;
        for (double a : alphas) {
            for (double b : betas) {
                for (double t : theta_mins) {
                    if (t > a) continue;  // invalid combination
                    Point p{a, b, t, sweep_key(a, b, t)};
                    if (!done.count(p.key)) points.push_back(std::move(p));
                }
            }
        }

        const int n_workers = std::max(1, workers);
        for (std::size_t at = 0; at < points.size(); at += static_cast<std::size_t>(n_workers)) {
            const std::size_t end = std::min(points.size(), at + static_cast<std::size_t>(n_workers));
            std::vector<json> results(end - at);
            auto run_point = [&](std::size_t idx) {
                const Point& p = points[idx];
                try {
                    ThresholdParams params{p.alpha, p.beta, p.theta_min};
                    const EvalOut ev =
                        eval_schedule(MergeSchedule::layer_dependent(params), cfg.model, w, batches);
                    results[idx - at] = json{{"type", "sweep_point"},
                                             {"key", p.key},
                                             {"alpha", p.alpha},
                                             {"beta", p.beta},
                                             {"theta_min", p.theta_min},
                                             {"gflops", ev.gflops},
                                             {"reduction_pct", ev.reduction * 100.0}};
                } catch (const Error& e) {
                    results[idx - at] = json{{"type", "error"},
                                             {"category", e.category()},
                                             {"key", p.key},
                                             {"message", e.what()}};
                }
            };
            if (n_workers == 1) {
                for (std::size_t i = at; i < end; ++i) run_point(i);
            } else {
                std::vector<std::thread> threads;
                for (std::size_t i = at; i < end; ++i) threads.emplace_back(run_point, i);
                for (auto& t : threads) t.join();
            }
            // single writer keeps the stream well-formed and ordered
            for (auto& r : results) rec.emit(r);
            out.flush();
        }
        return 0;
    });
}

int cmd_verify(std::uint64_t trials, std::uint64_t seed, double upper_coefficient,
               std::ostream& out) {
    RecordWriter rec(out);
    return guard(rec, [&]() {
        theory::VerifyOptions opts;
        opts.trials = trials;
        opts.seed = seed;
        opts.upper_coefficient = upper_coefficient;
        const theory::VerifyReport bounds = theory::verify_bounds(opts);

        const std::uint64_t closed_trials = std::max<std::uint64_t>(1, trials / 10);
        const theory::AgreementReport agree = theory::verify_closed_form(closed_trials, seed, 64);

        rec.emit(json{{"type", "verify"},
                      {"trials", bounds.trials},
                      {"violations", bounds.violation_count},
                      {"min_ratio_to_lower", bounds.min_ratio_to_lower},
                      {"max_ratio_to_upper", bounds.max_ratio_to_upper},
                      {"closed_form_trials", agree.trials},
                      {"closed_form_max_rel_diff", agree.max_rel_diff}});
        for (const auto& v : bounds.violations) {
            rec.emit(json{{"type", "error"},
                          {"category", "bound-violation"},
                          {"trial", v.trial},
                          {"case_seed", v.case_seed},
                          {"n_i", v.c.n_i},
                          {"n_j", v.c.n_j},
                          {"delta", v.c.delta()},
                          {"error", v.error},
                          {"lower", v.lower},
                          {"upper", v.upper},
                          {"x_i", v.c.x_i},
                          {"x_j", v.c.x_j}});
        }
        if (agree.max_rel_diff > 1e-9) {
            rec.emit_error("closed-form-disagreement",
                           "max relative difference " + std::to_string(agree.max_rel_diff));
        }
        return bounds.ok() && agree.max_rel_diff <= 1e-9 ? 0 : 1;
    });
}

int cmd_probe_loss(const RunConfig& cfg, const std::vector<double>& thetas,
                   const std::string& out_dir) {
    std::ofstream records = open_out_file(out_dir, "records.jsonl");
    RecordWriter rec(records);
    return guard(rec, [&]() {
        for (double theta : thetas) {
            if (!(theta > 0.0) || !(theta > 0.0 && theta <= 1.0)) {
                throw ConfigError("probe thetas must lie in (0, 1]");
            }
        }
        const ModelWeights w = resolve_weights(cfg);
        const auto singles = load_input_pool(cfg, w);
        const auto batches = rebatch(singles, cfg.batch_size);

        std::vector<MatrixD> baseline;
        std::size_t images = 0;
        for (const auto& batch : batches) {
            baseline.push_back(theory::final_cls_rows(cfg.model, w, batch, MergeSchedule::no_op()));
            images += batch.batch_size();
        }

        for (int layer = 1; layer <= cfg.model.depth; ++layer) {
            double avg_over_thetas = 0.0;
            for (double theta : thetas) {
                MergeSchedule probe = MergeSchedule::constant_threshold(theta);
                probe.only_layer = layer;
                double weighted = 0.0;
                for (std::size_t bi = 0; bi < batches.size(); ++bi) {
                    const MatrixD cls = theory::final_cls_rows(cfg.model, w, batches[bi], probe);
                    weighted += theory::mean_cls_distance(baseline[bi], cls) *
                                static_cast<double>(batches[bi].batch_size());
                }
                const double dist = weighted / static_cast<double>(images);
                avg_over_thetas += dist;
                rec.emit(json{{"type", "probe"},
                              {"layer", layer},
                              {"theta", theta},
                              {"cls_distance", dist}});
            }
            rec.emit(json{{"type", "probe_avg"},
                          {"layer", layer},
                          {"cls_distance", avg_over_thetas / static_cast<double>(thetas.size())}});
        }
        return 0;
    });
}

int cmd_batch_sensitivity(const RunConfig& cfg, const std::vector<std::size_t>& batch_sizes,
                          const std::string& out_dir) {
    std::ofstream records = open_out_file(out_dir, "records.jsonl");
    RecordWriter rec(records);
    return guard(rec, [&]() {
        const ModelWeights w = resolve_weights(cfg);
        const auto singles = load_input_pool(cfg, w);
        for (std::size_t size : batch_sizes) {
            if (size < 1) throw ConfigError("batch sizes must be >= 1");
            if (singles.size() < size) {
                throw ConfigError("input pool of " + std::to_string(singles.size()) +
                                  " images is smaller than batch size " + std::to_string(size));
            }
            const auto batches = rebatch(singles, size);
            const EvalOut ev = eval_schedule(cfg.schedule, cfg.model, w, batches);
            rec.emit(json{{"type", "batch_sensitivity"},
                          {"batch_size", size},
                          {"mean_gflops", ev.gflops},
                          {"reduction_pct", ev.reduction * 100.0}});
        }
        return 0;
    });
}

int cmd_render(const RunConfig& cfg, const std::string& out_dir) {
    RunConfig render_cfg = cfg;
    render_cfg.emit = EmitFlags{false, false, true, true};
    return cmd_run(render_cfg, out_dir);
}

// -------------------- argv entry point --------------------

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"adaptive token merging engine"};
    app.require_subcommand(1);

    std::string config_path, out_override, trace_path;
    std::uint64_t seed = 0;
    bool have_seed = false;
    std::uint64_t trials = 100000;
    double upper_coefficient = 2.0;
    double target_reduction = 0.30;
    std::vector<double> thetas{0.8, 0.85, 0.9, 0.95};
    std::vector<std::size_t> batch_sizes;
    std::vector<double> alphas, betas, theta_mins;
    int workers = 1;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run-config file (JSON)")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_option("--out", out_override, "output directory (overrides config)");
        sub->add_option_function<std::uint64_t>(
            "--seed", [&](const std::uint64_t& v) { seed = v; have_seed = true; },
            "seed override");
    };

    CLI::App* run = app.add_subcommand("run", "forward pass with a merge schedule");
    add_common(run);

    CLI::App* flops = app.add_subcommand("flops", "FLOPs accounting for a config or trace");
    add_common(flops);
    flops->add_option("--trace", trace_path, "trace.jsonl from a previous run")
        ->check(CLI::ExistingFile);

    CLI::App* compare = app.add_subcommand("compare-schedules",
                                           "tune every schedule kind to a FLOPs target");
    add_common(compare);
    compare->add_option("--target-reduction", target_reduction, "FLOPs reduction in (0,1)")
        ->required()
        ->check(CLI::Range(1e-6, 0.999999));

    CLI::App* sweep = app.add_subcommand("sweep", "hyperparameter grid sweep (resumable)");
    add_common(sweep);
    sweep->add_option("--alphas", alphas, "alpha values")->delimiter(',');
    sweep->add_option("--betas", betas, "beta values")->delimiter(',');
    sweep->add_option("--theta-mins", theta_mins, "theta_min values")->delimiter(',');
    sweep->add_option("--workers", workers, "parallel sweep workers")
        ->envname("ATM_WORKERS")
        ->check(CLI::PositiveNumber);

    CLI::App* verify = app.add_subcommand("verify", "merging-error bound verification");
    verify->add_option("--trials", trials, "number of random cases")
        ->check(CLI::PositiveNumber);
    verify->add_option("--seed", seed, "base seed");
    verify->add_option("--upper-coefficient", upper_coefficient,
                       "bound coefficient (harness self-test seam)")
        ->group("");  // hidden

    CLI::App* probe = app.add_subcommand("probe-loss", "layer-wise information-loss probe");
    add_common(probe);
    probe->add_option("--thetas", thetas, "similarity thresholds")->delimiter(',');

    CLI::App* sensitivity =
        app.add_subcommand("batch-sensitivity", "re-run one pool at several batch sizes");
    add_common(sensitivity);
    sensitivity->add_option("--batch-sizes", batch_sizes, "batch sizes to compare")
        ->required()
        ->delimiter(',');

    CLI::App* render = app.add_subcommand("render", "token-map rendering only");
    add_common(render);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (app.got_subcommand(verify)) {
            return cmd_verify(trials, seed, upper_coefficient, std::cout);
        }
        RunConfig cfg = RunConfig::from_file(config_path);
        if (have_seed) cfg.model.seed = seed;
        const std::string out_dir = out_override.empty() ? cfg.outputs : out_override;

        if (app.got_subcommand(run)) return cmd_run(cfg, out_dir);
        if (app.got_subcommand(flops)) {
            return cmd_flops(cfg,
                             trace_path.empty() ? std::nullopt
                                                : std::optional<std::string>{trace_path},
                             out_dir);
        }
        if (app.got_subcommand(compare)) {
            return cmd_compare_schedules(cfg, target_reduction, out_dir);
        }
        if (app.got_subcommand(sweep)) {
            if (alphas.empty()) alphas = default_alpha_grid();
            if (betas.empty()) betas = default_beta_grid();
            if (theta_mins.empty()) theta_mins = default_theta_min_grid();
            return cmd_sweep(cfg, alphas, betas, theta_mins, out_dir, workers);
        }
        if (app.got_subcommand(probe)) return cmd_probe_loss(cfg, thetas, out_dir);
        if (app.got_subcommand(sensitivity)) {
            return cmd_batch_sensitivity(cfg, batch_sizes, out_dir);
        }
        if (app.got_subcommand(render)) return cmd_render(cfg, out_dir);
    } catch (const Error& e) {
        std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error[internal]: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace atm::cli
