#pragma once

// H2MGNODE: per-class encoders, address latents driven by a learned ODE
//   dh_a/dt = F([h_a, tanh(sum of incoming messages M^{c,o}(h_e, x~_e))])
// integrated by explicit Euler from h = 0 over t in [0, 1], then per-class
// decoders on (x~_e, h_e(1)). Reverse-mode gradients are hand written and
// replay checkpointed segments of the trajectory.

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridtvc/h2mg.hpp"

namespace gridtvc {

struct ModelConfig {
  int latent = 64;
  std::vector<int> encoder_hidden{128, 128};
  int encoder_out = 64;
  std::vector<int> message_hidden{128, 128};
  std::vector<int> decoder_hidden{128, 128};
  double dt = 0.005;
  double leaky_slope = 0.01;
  int checkpoint_every = 20;

  int steps() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// A named weight or bias inside the flat parameter vector, row-major.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

/// A normalized context laid out for the model: one block per non-empty
/// class, edges sorted by id.
struct CompiledClass {
  std::size_t schema_index = 0;
  std::string name;
  std::vector<std::string> ids;
  Eigen::MatrixXd features;                  // edges x max(1, #features)
  std::vector<std::vector<Address>> ports;   // [schema port][edge]
};

struct CompiledContext {
  std::size_t addresses = 0;
  std::vector<CompiledClass> classes;  // schema (name) order
};

CompiledContext compile_context(const H2MGContext& normalized);

struct InitOptions {
  bool zero = false;                 // every parameter 0
  bool zero_decoder_output = false;  // final decoder layers 0
};

/// Saved forward state for a later vjp.
struct ForwardTape {
  std::vector<std::vector<Eigen::MatrixXd>> encoder;  // per class: layer I/O
  std::vector<std::vector<Eigen::MatrixXd>> message_x;  // per class, port
  std::vector<Eigen::MatrixXd> checkpoints;  // H at steps 0, K, 2K, ...
  Eigen::MatrixXd h_final;
};

class H2mgNode {
 public:
  explicit H2mgNode(ModelConfig cfg = {});

  const ModelConfig& config() const { return cfg_; }
  std::size_t size() const { return size_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }

  std::vector<double> init(std::uint64_t seed, const InitOptions& opt = {}) const;

  /// Raw surrogate decision z_raw for every controller of x.
  SurrogateDecision forward(const std::vector<double>& theta,
                            const CompiledContext& x,
                            ForwardTape* tape = nullptr) const;

  /// J_theta[z_raw](x)^T cot. Recomputes the forward pass unless a tape from
  /// forward(theta, x) is given.
  std::vector<double> vjp(const std::vector<double>& theta,
                          const CompiledContext& x,
                          const SurrogateDecision& cot,
                          const ForwardTape* tape = nullptr) const;

 private:
  struct Layer {
    std::size_t w = 0, b = 0;
    int in = 0, out = 0;
  };
  struct Mlp {
    std::vector<Layer> layers;
    bool activate_output = false;
  };
  struct ClassNet {
    Mlp encoder;
    std::vector<Mlp> messages;  // per schema port
    std::vector<std::size_t> port_order;  // schema ports sorted by name
    bool has_decoder = false;
    Mlp decoder;
    int decision_width = 0;
  };
  struct StepState;

  Mlp add_mlp(const std::string& prefix, int in, const std::vector<int>& hidden,
              int out, bool activate_output);
  void check(const std::vector<double>& theta, const CompiledContext& x) const;

  void mlp_forward(const double* theta, const Mlp& m, const Eigen::MatrixXd& in,
                   std::vector<Eigen::MatrixXd>& acts) const;
  void mlp_backward(const double* theta, double* grad, const Mlp& m,
                    const std::vector<Eigen::MatrixXd>& acts, Eigen::MatrixXd d,
                    Eigen::MatrixXd* d_in, std::size_t stop_layer = 0) const;

  void encode(const double* theta, const CompiledContext& x,
              ForwardTape& tape) const;
  void step(const double* theta, const CompiledContext& x,
            const ForwardTape& tape, const Eigen::MatrixXd& h,
            Eigen::MatrixXd& h_next, StepState* keep) const;
  Eigen::MatrixXd gather(const CompiledClass& c, const Eigen::MatrixXd& h) const;
  void run(const double* theta, const CompiledContext& x, ForwardTape& tape) const;

  ModelConfig cfg_;
  std::vector<ParamBlock> blocks_;
  std::vector<ClassNet> nets_;  // schema order
  Mlp dynamics_;
  std::size_t size_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint documents

struct Checkpoint {
  ModelConfig model;
  std::vector<double> theta;
  std::uint64_t seed = 0;
  std::uint64_t schema_hash = 0;
  std::uint64_t normalizer_hash = 0;
  nlohmann::json extra;  // normalizer, policy, baseline offset, iteration
};

nlohmann::json checkpoint_to_json(const H2mgNode& net, const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& doc);
void save_checkpoint(const H2mgNode& net, const Checkpoint& c,
                     const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace gridtvc
