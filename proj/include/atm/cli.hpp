#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atm/cost.hpp"
#include "atm/merging.hpp"
#include "atm/model.hpp"

namespace atm::cli {

struct EmitFlags {
    bool trace = true;
    bool cost = true;
    bool token_maps = false;
    bool records = true;
};

// One run: model geometry, weight source, schedule, inputs, batching and
// output selection. Mirrors the JSON config file documented in the README.
struct RunConfig {
    ModelConfig model;
    std::string weights_spec = "synthetic";  // path or synthetic[:<seed>]
    MergeSchedule schedule;
    std::vector<std::string> inputs;  // image/dump paths or synthetic:<seed>[:<count>]
    std::size_t batch_size = 1;
    std::string outputs = "out";
    EmitFlags emit;

    static RunConfig from_file(const std::string& path);
    static RunConfig from_json(const nlohmann::json& j, const std::string& base_dir);
    nlohmann::json to_json() const;
};

// Line-delimited record stream; every record is one JSON object. Tracks
// whether any error record went out, which drives the exit status.
class RecordWriter {
public:
    explicit RecordWriter(std::ostream& out) : out_(&out) {}

    void emit(const nlohmann::json& record);
    void emit_error(const std::string& category, const std::string& message);
    bool any_error() const { return any_error_; }

private:
    std::ostream* out_;
    bool any_error_ = false;
};

ModelWeights resolve_weights(const RunConfig& cfg);

// Expands config inputs into single-image token batches (shared geometry
// enforced), then groups them by batch size.
std::vector<TokenBatch> load_input_pool(const RunConfig& cfg, const ModelWeights& w);
std::vector<TokenBatch> rebatch(const std::vector<TokenBatch>& singles, std::size_t batch_size);

struct RunArtifacts {
    std::vector<Trace> traces;       // one per batch
    std::vector<CostReport> costs;   // one per batch
    double mean_gflops = 0.0;
    double reduction_pct = 0.0;
};

// Per-schedule tuning outcome from the schedule comparison.
struct ScheduleRow {
    MergeSchedule schedule;
    std::string param_name;
    double param_value = 0.0;
    double gflops = 0.0;
    double baseline_gflops = 0.0;
    double reduction_pct = 0.0;
    bool target_met = false;
    bool feasible = true;
    std::vector<double> merges_per_layer;  // batch-mean merged pairs per layer
};

// Tunes one schedule kind's free parameter until the FLOPs reduction lands
// within +/-1% of target (integer parameters: nearest achievable value).
ScheduleRow tune_schedule(ScheduleKind kind, double target_reduction, const RunConfig& cfg,
                          const ModelWeights& w, const std::vector<TokenBatch>& batches);

int cmd_run(const RunConfig& cfg, const std::string& out_dir);
int cmd_flops(const RunConfig& cfg, const std::optional<std::string>& trace_path,
              const std::string& out_dir);
int cmd_compare_schedules(const RunConfig& cfg, double target_reduction,
                          const std::string& out_dir);
int cmd_sweep(const RunConfig& cfg, const std::vector<double>& alphas,
              const std::vector<double>& betas, const std::vector<double>& theta_mins,
              const std::string& out_dir, int workers);
int cmd_verify(std::uint64_t trials, std::uint64_t seed, double upper_coefficient,
               std::ostream& out);
int cmd_probe_loss(const RunConfig& cfg, const std::vector<double>& thetas,
                   const std::string& out_dir);
int cmd_batch_sensitivity(const RunConfig& cfg, const std::vector<std::size_t>& batch_sizes,
                          const std::string& out_dir);
int cmd_render(const RunConfig& cfg, const std::string& out_dir);

// Default sweep grid: alpha 0.945..1.000, beta 0.015..0.050,
// theta_min 0.800..0.945, all in steps of 0.005.
std::vector<double> default_alpha_grid();
std::vector<double> default_beta_grid();
std::vector<double> default_theta_min_grid();

int run_cli(int argc, const char* const* argv);

}  // namespace atm::cli
