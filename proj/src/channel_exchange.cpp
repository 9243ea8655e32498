#include "depthlab/channel_exchange.hpp"

#include <cmath>
#include <stdexcept>

namespace depthlab {

namespace {

void check_branches(const std::vector<ExchangeBranch>& branches) {
  if (branches.size() < 2) throw std::invalid_argument("exchange: need at least 2 branches");
  const size_t c = branches[0].channels.size();
  if (c == 0) throw std::invalid_argument("exchange: branches have no channels");
  for (const ExchangeBranch& b : branches) {
    if (b.channels.size() != c || b.gamma.size() != c || b.beta.size() != c)
      throw std::invalid_argument("exchange: channel count mismatch across branches");
  }
}

}  // namespace

void BnBranchParams::validate() const {
  if (gamma.shape.size() != 1 || !gamma.same_shape(beta) || !gamma.same_shape(mu) ||
      !gamma.same_shape(var))
    throw std::invalid_argument("BnBranchParams: gamma/beta/mu/var must share shape {C}");
  if (gamma.size() == 0) throw std::invalid_argument("BnBranchParams: no channels");
  if (eps < 0 || !std::isfinite(eps)) throw std::invalid_argument("BnBranchParams: eps < 0");
  for (int64_t c = 0; c < var.size(); ++c) {
    if (var[c] < 0) throw std::invalid_argument("BnBranchParams: variance < 0");
    if (var[c] + eps <= 0)
      throw std::invalid_argument("BnBranchParams: var + eps must be > 0");
  }
}

void ExchangeConfig::validate() const {
  if (!(theta > 0)) throw std::invalid_argument("ExchangeConfig: theta must be > 0");
}

ExchangeBranch stage_branch(ad::Tape& tape, const std::vector<Tensor>& channels,
                            const BnBranchParams& params) {
  params.validate();
  if (static_cast<int64_t>(channels.size()) != params.channels())
    throw std::invalid_argument("stage_branch: channel count mismatch");
  ExchangeBranch b;
  b.mu = params.mu;
  b.var = params.var;
  b.eps = params.eps;
  for (size_t c = 0; c < channels.size(); ++c) {
    if (channels[c].shape.size() != 2 || !channels[c].same_shape(channels[0]))
      throw std::invalid_argument("stage_branch: channels must be matching {H, W} planes");
    b.channels.push_back(tape.constant(channels[c]));
    b.gamma.push_back(tape.leaf(Tensor::scalar(params.gamma[c])));
    b.beta.push_back(tape.leaf(Tensor::scalar(params.beta[c])));
  }
  return b;
}

std::vector<ad::Var> bn_normalize(ad::Tape& tape, const ExchangeBranch& branch) {
  (void)tape;
  const size_t c = branch.channels.size();
  if (branch.gamma.size() != c || branch.beta.size() != c ||
      branch.mu.size() != static_cast<int64_t>(c) || branch.var.size() != static_cast<int64_t>(c))
    throw std::invalid_argument("bn_normalize: channel count mismatch");
  std::vector<ad::Var> out;
  out.reserve(c);
  for (size_t i = 0; i < c; ++i) {
    const double inv = 1.0 / std::sqrt(branch.var[static_cast<int64_t>(i)] + branch.eps);
    ad::Var norm = (branch.channels[i] - branch.mu[static_cast<int64_t>(i)]) * inv;
    out.push_back(branch.gamma[i] * norm + branch.beta[i]);
  }
  return out;
}

ExchangeResult exchange(ad::Tape& tape, const std::vector<ExchangeBranch>& branches,
                        const ExchangeConfig& config) {
  config.validate();
  check_branches(branches);
  const size_t m_count = branches.size();
  const size_t c_count = branches[0].channels.size();
  const Tensor& plane0 = tape.value(branches[0].channels[0]);
  const std::vector<int64_t> plane_shape = plane0.shape;
  for (const ExchangeBranch& b : branches)
    for (ad::Var ch : b.channels)
      if (!tape.value(ch).same_shape(plane0))
        throw std::invalid_argument("exchange: plane shape mismatch across branches");

  std::vector<std::vector<ad::Var>> bn(m_count);
  for (size_t m = 0; m < m_count; ++m) bn[m] = bn_normalize(tape, branches[m]);

  ExchangeResult out;
  out.fused.resize(m_count);
  out.source.resize(m_count);
  for (size_t m = 0; m < m_count; ++m) {
    for (size_t c = 0; c < c_count; ++c) {
      const double g = tape.value(branches[m].gamma[c])[0];
      if (std::abs(g) > config.theta) {
        out.fused[m].push_back(bn[m][c]);
        out.source[m].push_back(Tensor::full(plane_shape, static_cast<double>(m)));
        continue;
      }
      std::vector<size_t> donors;
      for (size_t d = 0; d < m_count; ++d)
        if (d != m) donors.push_back(d);

      if (config.mode == ExchangeMode::kMean) {
        ad::Var acc = bn[donors[0]][c];
        for (size_t k = 1; k < donors.size(); ++k) acc = acc + bn[donors[k]][c];
        out.fused[m].push_back(acc * (1.0 / static_cast<double>(donors.size())));
        out.source[m].push_back(Tensor::full(plane_shape, kMixedSource));
        continue;
      }

      // Max mode: chained vmax ties to the first (lowest-index) donor; the
      // argmax raster uses strict > so it matches that convention.
      ad::Var acc = bn[donors[0]][c];
      for (size_t k = 1; k < donors.size(); ++k) acc = ad::vmax(acc, bn[donors[k]][c]);
      Tensor src = Tensor::full(plane_shape, static_cast<double>(donors[0]));
      Tensor best = tape.value(bn[donors[0]][c]);
      for (size_t k = 1; k < donors.size(); ++k) {
        const Tensor& cand = tape.value(bn[donors[k]][c]);
        for (int64_t i = 0; i < best.size(); ++i) {
          if (cand[i] > best[i]) {
            best[i] = cand[i];
            src[i] = static_cast<double>(donors[k]);
          }
        }
      }
      out.fused[m].push_back(acc);
      out.source[m].push_back(std::move(src));
    }
  }
  return out;
}

Tensor FusionHead::alpha() const {
  if (alpha_logits.shape.size() != 1 || alpha_logits.size() == 0)
    throw std::invalid_argument("FusionHead: logits must be a nonempty vector");
  double mx = alpha_logits[0];
  for (int64_t i = 1; i < alpha_logits.size(); ++i) mx = std::max(mx, alpha_logits[i]);
  Tensor a = Tensor::zeros(alpha_logits.shape);
  double sum = 0;
  for (int64_t i = 0; i < a.size(); ++i) {
    a[i] = std::exp(alpha_logits[i] - mx);
    sum += a[i];
  }
  for (int64_t i = 0; i < a.size(); ++i) a[i] /= sum;
  return a;
}

ad::Var fuse(ad::Tape& tape, const std::vector<ad::Var>& outputs, const FusionHead& head) {
  const Tensor a = head.alpha();
  if (a.size() != static_cast<int64_t>(outputs.size()))
    throw std::invalid_argument("fuse: output count does not match the head");
  for (ad::Var o : outputs)
    if (!tape.value(o).same_shape(tape.value(outputs[0])))
      throw std::invalid_argument("fuse: output shape mismatch");
  ad::Var acc = outputs[0] * a[0];
  for (size_t m = 1; m < outputs.size(); ++m)
    acc = acc + outputs[m] * a[static_cast<int64_t>(m)];
  return acc;
}

ExchangeResult exchange_demo(ad::Tape& tape, const Tensor& disparity, const Tensor& ir,
                             const Tensor& sparse, const std::vector<BnBranchParams>& params,
                             const ExchangeConfig& config) {
  if (params.size() != 3) throw std::invalid_argument("exchange_demo: need 3 parameter sets");
  std::vector<ExchangeBranch> branches;
  branches.push_back(stage_branch(tape, {disparity}, params[0]));
  branches.push_back(stage_branch(tape, {ir}, params[1]));
  branches.push_back(stage_branch(tape, {sparse}, params[2]));
  return exchange(tape, branches, config);
}

}  // namespace depthlab
