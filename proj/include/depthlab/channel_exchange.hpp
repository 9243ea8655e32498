#pragma once

#include <vector>

#include "depthlab/autodiff.hpp"
#include "depthlab/tensor.hpp"

namespace depthlab {

// Multi-branch channel exchange: each branch runs the same backbone with its
// own batch-norm parameters; channels whose scaling magnitude falls at or
// below a threshold are replaced by the mean or elementwise max of the other
// branches' normalized outputs, and a softmax head blends the branch outputs.

// Per-branch batch-norm parameters and statistics, one entry per channel.
// Statistics are supplied, not estimated; this module exercises the exchange
// mechanism, not training.
struct BnBranchParams {
  Tensor gamma, beta, mu, var;  // shape {C}
  double eps = 1e-5;

  int64_t channels() const { return gamma.size(); }
  // Matching {C} shapes, var >= 0, eps >= 0, var + eps > 0 per channel. An
  // exact-identity configuration (var = 1, eps = 0) is legal.
  void validate() const;
};

enum class ExchangeMode { kMean, kMax };

struct ExchangeConfig {
  // A channel is kept when |gamma| > theta and exchanged otherwise. The
  // threshold is a free choice; 0.02 is the default reported in metadata.
  double theta = 0.02;
  ExchangeMode mode = ExchangeMode::kMax;

  void validate() const;  // theta > 0
};

// One branch staged on the tape: channel planes as constants, gamma/beta as
// scalar leaves so routing decisions can be checked against their gradients.
struct ExchangeBranch {
  std::vector<ad::Var> channels;  // C planes, each {H, W}
  std::vector<ad::Var> gamma;     // C scalar leaves
  std::vector<ad::Var> beta;      // C scalar leaves
  Tensor mu, var;                 // shape {C}
  double eps = 1e-5;
};

ExchangeBranch stage_branch(ad::Tape& tape, const std::vector<Tensor>& channels,
                            const BnBranchParams& params);

// Plain affine normalization with the branch's supplied statistics.
std::vector<ad::Var> bn_normalize(ad::Tape& tape, const ExchangeBranch& branch);

// source[m][c] code for a pixel whose value was blended in mean mode.
constexpr double kMixedSource = -1.0;

struct ExchangeResult {
  // fused[m][c]: branch m's channel c after the exchange.
  std::vector<std::vector<ad::Var>> fused;
  // source[m][c].at(y, x): branch index the value came from. Equal to m for
  // kept channels, the per-pixel argmax donor in max mode (ties to the
  // lowest branch index), kMixedSource in mean mode.
  std::vector<std::vector<Tensor>> source;
};

// The keep/exchange decision is made from gamma magnitudes and detached from
// the tape; gradients flow through the surviving value path only.
ExchangeResult exchange(ad::Tape& tape, const std::vector<ExchangeBranch>& branches,
                        const ExchangeConfig& config);

// Softmax decision head over the branch outputs.
struct FusionHead {
  Tensor alpha_logits;  // shape {M}

  Tensor alpha() const;  // softmax of the logits; sums to 1
};

// Convex combination of per-branch outputs with the head's weights.
ad::Var fuse(ad::Tape& tape, const std::vector<ad::Var>& outputs, const FusionHead& head);

// Toy three-branch stack (initial disparity, guide image, sparse raster),
// one channel each: stages the branches, runs the exchange, and returns the
// result whose source maps are the routing visualization.
ExchangeResult exchange_demo(ad::Tape& tape, const Tensor& disparity, const Tensor& ir,
                             const Tensor& sparse, const std::vector<BnBranchParams>& params,
                             const ExchangeConfig& config);

}  // namespace depthlab
