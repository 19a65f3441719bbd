#include "cof/flowmatch.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "cof/adam.hpp"
#include "cof/error.hpp"

namespace cof {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ConstMap = Eigen::Map<const MatrixXd>;
using MutMap = Eigen::Map<MatrixXd>;

namespace {

// tanh through the packet-vectorized exp; |z| <= 20 already saturates in double.
MatrixXd fast_tanh(const MatrixXd& z) {
  const Eigen::ArrayXXd e = (2.0 * z.array().max(-20.0).min(20.0)).exp();
  return ((e - 1.0) / (e + 1.0)).matrix();
}

}  // namespace

std::vector<double> rea_features(const Volume3D& reference) {
  reference.validate();
  const Grid& g = reference.grid;
  constexpr int cells = kReaCells * kReaCells * kReaCells;
  std::vector<double> sum(cells, 0.0), sumsq(cells, 0.0), count(cells, 0.0);
  std::size_t i = 0;
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x, ++i) {
        const int cx = x * kReaCells / g.dims[0];
        const int cy = y * kReaCells / g.dims[1];
        const int cz = z * kReaCells / g.dims[2];
        const int c = (cz * kReaCells + cy) * kReaCells + cx;
        sum[c] += reference.data[i];
        sumsq[c] += reference.data[i] * reference.data[i];
        count[c] += 1.0;
      }
  std::vector<double> out(2 * cells, 0.0);
  for (int c = 0; c < cells; ++c) {
    if (count[c] == 0.0) continue;
    const double mean = sum[c] / count[c];
    out[c] = mean;
    out[cells + c] = std::sqrt(std::max(0.0, sumsq[c] / count[c] - mean * mean));
  }
  return out;
}

void VelocityNetConfig::validate() const {
  require(ecg_features >= 1 && rea_features >= 1, ErrorCode::invalid_argument, "condition feature sizes must be >= 1");
  require(time_dim >= 2 && time_dim % 2 == 0, ErrorCode::invalid_argument, "time_dim must be even and >= 2");
  require(rea_dim >= 1 && width >= 1 && hidden_layers >= 1, ErrorCode::invalid_argument,
          "rea_dim, width and hidden_layers must be >= 1");
  for (int a = 0; a < 3; ++a) require(domain_dims[a] >= 1, ErrorCode::invalid_argument, "domain dims must be >= 1");
}

VelocityNet::VelocityNet(const VelocityNetConfig& cfg) : cfg_(cfg) {
  cfg.validate();
  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    blocks_.push_back({std::move(name), rows, cols, offset});
    offset += static_cast<std::size_t>(rows) * cols;
  };
  const int td = cfg.time_dim, w = cfg.width;
  add("ecg.W", td, static_cast<int>(cfg.ecg_features));
  add("ecg.b", td, 1);
  add("rea.W", cfg.rea_dim, static_cast<int>(cfg.rea_features));
  add("rea.b", cfg.rea_dim, 1);
  for (int l = 0; l < cfg.hidden_layers; ++l) {
    const int in = l == 0 ? 3 + td : w + (l == 1 ? cfg.rea_dim : 0);
    add("layer" + std::to_string(l) + ".W", w, in);
    add("layer" + std::to_string(l) + ".b", w, 1);
  }
  add("head.W", 3, w + (cfg.hidden_layers == 1 ? cfg.rea_dim : 0));
  add("head.b", 3, 1);
  params_.assign(offset, 0.0);

  // LeCun-normal weights, zero biases.
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const Block& b : blocks_) {
    if (b.cols == 1 && b.name.ends_with(".b")) continue;
    if (b.name == "head.W" && cfg.zero_head) continue;
    const double sd = 1.0 / std::sqrt(static_cast<double>(b.cols));
    for (std::size_t i = 0; i < static_cast<std::size_t>(b.rows) * b.cols; ++i) params_[b.offset + i] = sd * normal(rng);
  }
}

Vec3 VelocityNet::normalize_position(const Vec3& voxel) const {
  Vec3 out;
  for (int a = 0; a < 3; ++a) {
    const double half = 0.5 * (cfg_.domain_dims[a] - 1);
    out[a] = half > 0.0 ? voxel[a] / half - 1.0 : 0.0;
  }
  return out;
}

/// Batched forward/backward for samples that share one condition.
class VelocityNetEvaluator {
 public:
  explicit VelocityNetEvaluator(const VelocityNet& net) : net_(net), cfg_(net.cfg_) {
    // Owned copies: Eigen picks reduction kernels by operand alignment, and a
    // mapped std::vector makes that depend on the heap.
    mats_.reserve(net.blocks_.size());
    for (std::size_t i = 0; i < net.blocks_.size(); ++i) {
      const auto& b = net.blocks_[i];
      index_[b.name] = i;
      mats_.emplace_back(ConstMap(net.params_.data() + b.offset, b.rows, b.cols));
    }
  }

  struct Cache {
    VectorXd ecg_proj, rea_proj;
    std::vector<MatrixXd> inputs;  // input to each hidden layer and the head
    std::vector<MatrixXd> hidden;  // tanh activations
  };

  void check(const ConditionEmbedding& cond) const {
    require(cond.c_ecg.size() == cfg_.ecg_features, ErrorCode::shape,
            "c_ecg length " + std::to_string(cond.c_ecg.size()) + " does not match the network (" +
                std::to_string(cfg_.ecg_features) + ")");
    require(cond.c_rea.size() == cfg_.rea_features, ErrorCode::shape,
            "c_rea length " + std::to_string(cond.c_rea.size()) + " does not match the network (" +
                std::to_string(cfg_.rea_features) + ")");
  }

  // X: 3 x B normalized positions; returns 3 x B velocities.
  MatrixXd forward(const ConditionEmbedding& cond, const MatrixXd& x, const VectorXd& t, Cache& cache) const {
    const auto batch = x.cols();
    const int td = cfg_.time_dim, w = cfg_.width, h = cfg_.hidden_layers;
    const VectorXd c_ecg = owned(cond.c_ecg);
    const VectorXd c_rea = owned(cond.c_rea);
    cache.ecg_proj = block("ecg.W") * c_ecg + block("ecg.b");
    cache.rea_proj = block("rea.W") * c_rea + block("rea.b");

    cache.inputs.assign(h + 1, MatrixXd());
    cache.hidden.assign(h, MatrixXd());
    MatrixXd& in0 = cache.inputs[0];
    in0.resize(3 + td, batch);
    in0.topRows(3) = x;
    const auto embed = [&](Eigen::Index j) {
      for (int k = 0; k < td / 2; ++k) {
        const double phase = 2.0 * std::numbers::pi * (k + 1) * t[j];
        in0(3 + 2 * k, j) = std::sin(phase);
        in0(3 + 2 * k + 1, j) = std::cos(phase);
      }
    };
    if (batch > 0 && (t.array() == t[0]).all()) {
      embed(0);
      in0.bottomRows(td).rightCols(batch - 1) = in0.bottomRows(td).col(0).replicate(1, batch - 1);
    } else {
      for (Eigen::Index j = 0; j < batch; ++j) embed(j);
    }
    in0.bottomRows(td).colwise() += cache.ecg_proj;

    for (int l = 0; l < h; ++l) {
      const std::string p = "layer" + std::to_string(l);
      MatrixXd z = block(p + ".W") * cache.inputs[l];
      z.colwise() += VectorXd(block(p + ".b"));
      cache.hidden[l] = fast_tanh(z);
      MatrixXd& next = cache.inputs[l + 1];
      if (l == 0) {
        next.resize(w + cfg_.rea_dim, batch);
        next.topRows(w) = cache.hidden[0];
        next.bottomRows(cfg_.rea_dim) = cache.rea_proj.replicate(1, batch);
      } else {
        next = cache.hidden[l];
      }
    }
    MatrixXd y = block("head.W") * cache.inputs[h];
    y.colwise() += VectorXd(block("head.b"));
    return net_.velocity_scale_ * y;
  }

  // Accumulates d loss / d params given d loss / d output (3 x B).
  void backward(const ConditionEmbedding& cond, const Cache& cache, const MatrixXd& dy,
                std::vector<double>& grad) const {
    const int td = cfg_.time_dim, w = cfg_.width, h = cfg_.hidden_layers;
    const MatrixXd dyh = net_.velocity_scale_ * dy;
    grad_block(grad, "head.W") += MatrixXd(dyh * cache.inputs[h].transpose());
    grad_block(grad, "head.b") += VectorXd(dyh.rowwise().sum());
    MatrixXd d_in = block("head.W").transpose() * dyh;

    VectorXd d_rea = VectorXd::Zero(cfg_.rea_dim);
    for (int l = h - 1; l >= 0; --l) {
      MatrixXd d_hidden;
      if (l == 0) {
        d_hidden = d_in.topRows(w);
        d_rea = d_in.bottomRows(cfg_.rea_dim).rowwise().sum();
      } else {
        d_hidden = d_in;
      }
      const MatrixXd dz = (d_hidden.array() * (1.0 - cache.hidden[l].array().square())).matrix();
      const std::string p = "layer" + std::to_string(l);
      grad_block(grad, p + ".W") += MatrixXd(dz * cache.inputs[l].transpose());
      grad_block(grad, p + ".b") += VectorXd(dz.rowwise().sum());
      d_in = block(p + ".W").transpose() * dz;
    }
    const VectorXd d_ecg = d_in.bottomRows(td).rowwise().sum();
    const VectorXd c_ecg = owned(cond.c_ecg);
    const VectorXd c_rea = owned(cond.c_rea);
    grad_block(grad, "ecg.W") += d_ecg * c_ecg.transpose();
    grad_block(grad, "ecg.b") += d_ecg;
    grad_block(grad, "rea.W") += d_rea * c_rea.transpose();
    grad_block(grad, "rea.b") += d_rea;
  }

 private:
  const VelocityNet::Block& find(const std::string& name) const { return net_.blocks_[index_.at(name)]; }
  const MatrixXd& block(const std::string& name) const { return mats_[index_.at(name)]; }
  static VectorXd owned(const std::vector<double>& v) {
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  MutMap grad_block(std::vector<double>& grad, const std::string& name) const {
    const auto& b = find(name);
    return MutMap(grad.data() + b.offset, b.rows, b.cols);
  }

  const VelocityNet& net_;
  const VelocityNetConfig& cfg_;
  std::map<std::string, std::size_t> index_;
  std::vector<MatrixXd> mats_;
};

Vec3 velocity_forward(const VelocityNet& net, const Vec3& x, double t, const ConditionEmbedding& cond) {
  const VelocityNetEvaluator eval(net);
  eval.check(cond);
  MatrixXd xm(3, 1);
  xm << x[0], x[1], x[2];
  VectorXd tv(1);
  tv << t;
  VelocityNetEvaluator::Cache cache;
  const MatrixXd y = eval.forward(cond, xm, tv, cache);
  return {y(0, 0), y(1, 0), y(2, 0)};
}

std::vector<Vec3> velocity_forward_batch(const VelocityNet& net, std::span<const Vec3> voxel_positions, double t,
                                         const ConditionEmbedding& cond) {
  const VelocityNetEvaluator eval(net);
  eval.check(cond);
  constexpr std::size_t kChunk = 256;
  std::vector<Vec3> out(voxel_positions.size());
  VelocityNetEvaluator::Cache cache;
  for (std::size_t start = 0; start < voxel_positions.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, voxel_positions.size() - start);
    MatrixXd xm(3, static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < n; ++j) {
      const Vec3 p = net.normalize_position(voxel_positions[start + j]);
      xm.col(static_cast<Eigen::Index>(j)) << p[0], p[1], p[2];
    }
    const VectorXd tv = VectorXd::Constant(static_cast<Eigen::Index>(n), t);
    const MatrixXd y = eval.forward(cond, xm, tv, cache);
    for (std::size_t j = 0; j < n; ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      out[start + j] = {y(0, c), y(1, c), y(2, c)};
    }
  }
  return out;
}

FlowSample ReferenceFlow::sample(std::size_t index) const {
  const std::size_t k = index % frames();
  return {positions[index], frame_times[k], velocities[index], subject};
}

FlowSample ReferenceFlow::interpolate(std::size_t trajectory, double t) const {
  const std::size_t frames_n = frames();
  const std::size_t base = trajectory * frames_n;
  // Interval [t_k, t_{k+1}); the last one wraps to the cycle end at t = 1.
  std::size_t k = static_cast<std::size_t>(
      std::upper_bound(frame_times.begin(), frame_times.end(), t) - frame_times.begin());
  k = k == 0 ? 0 : k - 1;
  const std::size_t next = (k + 1) % frames_n;
  const double t0 = frame_times[k];
  const double t1 = k + 1 < frames_n ? frame_times[k + 1] : 1.0;
  const double f = (t - t0) / (t1 - t0);
  FlowSample s;
  s.t = t;
  s.subject = subject;
  s.position = (1.0 - f) * positions[base + k] + f * positions[base + next];
  s.velocity = (1.0 - f) * velocities[base + k] + f * velocities[base + next];
  return s;
}

ReferenceFlow derive_reference_velocities(const DeformationSet& defs, const LabelVolume* sample_mask,
                                          int mask_dilation) {
  defs.validate();
  const std::size_t frames = defs.frame_count();
  require(frames >= 3, ErrorCode::insufficient_frames, "reference velocities need at least 3 frames");
  const Grid& g = defs.grid();
  require(defs.frame_times.back() < 1.0, ErrorCode::invalid_argument, "frame_times must lie in [0, 1)");

  std::vector<std::size_t> seeds;
  if (sample_mask) {
    require_same_grid(g, sample_mask->grid, "derive_reference_velocities mask");
    require(mask_dilation >= 0, ErrorCode::invalid_argument, "mask dilation must be non-negative");
    for (std::size_t i = 0; i < g.voxel_count(); ++i) {
      const Index3 c = g.coords(i);
      bool near = false;
      for (int dz = -mask_dilation; dz <= mask_dilation && !near; ++dz)
        for (int dy = -mask_dilation; dy <= mask_dilation && !near; ++dy)
          for (int dx = -mask_dilation; dx <= mask_dilation && !near; ++dx) {
            const int x = c[0] + dx, y = c[1] + dy, z = c[2] + dz;
            if (x < 0 || y < 0 || z < 0 || x >= g.dims[0] || y >= g.dims[1] || z >= g.dims[2]) continue;
            near = sample_mask->labels[g.linear(x, y, z)] != kBackground;
          }
      if (near) seeds.push_back(i);
    }
  } else {
    seeds.resize(g.voxel_count());
    for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = i;
  }

  ReferenceFlow out;
  out.dims = g.dims;
  out.frame_times = defs.frame_times;
  out.positions.resize(seeds.size() * frames);
  out.velocities.resize(seeds.size() * frames);
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    const Index3 c = g.coords(seeds[s]);
    const Vec3 x{double(c[0]), double(c[1]), double(c[2])};
    for (std::size_t k = 0; k < frames; ++k) out.positions[s * frames + k] = x + defs.fields[k].vectors[seeds[s]];
    for (std::size_t k = 0; k < frames; ++k) {
      // Periodic closure: the cycle returns to the reference at t = 1.
      const std::size_t kn = (k + 1) % frames;
      const std::size_t kp = (k + frames - 1) % frames;
      const double tn = k + 1 < frames ? defs.frame_times[k + 1] : 1.0 + defs.frame_times[0];
      const double tp = k > 0 ? defs.frame_times[k - 1] : defs.frame_times[frames - 1] - 1.0;
      out.velocities[s * frames + k] =
          (1.0 / (tn - tp)) * (out.positions[s * frames + kn] - out.positions[s * frames + kp]);
    }
  }
  return out;
}

double flow_matching_loss(const VelocityNet& net, std::span<const FlowSample> batch,
                          std::span<const ConditionEmbedding> conds, std::vector<double>* grad) {
  require(!batch.empty(), ErrorCode::invalid_argument, "flow matching batch is empty");
  const VelocityNetEvaluator eval(net);
  for (const auto& c : conds) eval.check(c);
  if (grad) grad->assign(net.parameter_count(), 0.0);

  std::map<std::size_t, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    require(batch[i].subject < conds.size(), ErrorCode::invalid_argument,
            "sample subject " + std::to_string(batch[i].subject) + " has no condition");
    by_subject[batch[i].subject].push_back(i);
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  VelocityNetEvaluator::Cache cache;
  for (const auto& [subject, members] : by_subject) {
    const auto n = static_cast<Eigen::Index>(members.size());
    MatrixXd x(3, n), target(3, n);
    VectorXd t(n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const FlowSample& s = batch[members[j]];
      const Vec3 p = net.normalize_position(s.position);
      x.col(j) << p[0], p[1], p[2];
      target.col(j) << s.velocity[0], s.velocity[1], s.velocity[2];
      t[j] = s.t;
    }
    const MatrixXd diff = eval.forward(conds[subject], x, t, cache) - target;
    total += diff.squaredNorm();
    if (grad) eval.backward(conds[subject], cache, (2.0 * inv_b) * diff, *grad);
  }
  return total * inv_b;
}

double flow_matching_loss(const VelocityNet& net, std::span<const FlowSample> batch, const ConditionEmbedding& cond,
                          std::vector<double>* grad) {
  for (const auto& s : batch)
    require(s.subject == 0, ErrorCode::invalid_argument, "single-condition loss expects subject 0 samples");
  return flow_matching_loss(net, batch, std::span<const ConditionEmbedding>(&cond, 1), grad);
}

void FlowTrainConfig::validate() const {
  require(iters >= 1 && batch >= 1, ErrorCode::invalid_argument, "iters and batch must be >= 1");
  require(lr > 0.0 && weight_decay >= 0.0, ErrorCode::invalid_argument, "lr must be positive, weight_decay >= 0");
}

double reference_velocity_scale(std::span<const ReferenceFlow> refs) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& r : refs) {
    for (const auto& v : r.velocities) sum += dot(v, v);
    count += r.velocities.size();
  }
  if (count == 0 || sum <= 0.0) return 1.0;
  return std::max(1e-6, std::sqrt(sum / (3.0 * static_cast<double>(count))));
}

FlowTrainResult train_flow(VelocityNet net, std::span<const ReferenceFlow> refs,
                           std::span<const ConditionEmbedding> conds, const FlowTrainConfig& cfg) {
  cfg.validate();
  require(!refs.empty(), ErrorCode::insufficient_data, "train_flow needs at least one subject");
  require(refs.size() == conds.size(), ErrorCode::invalid_argument, "each subject needs both references and a condition");
  for (std::size_t s = 0; s < refs.size(); ++s)
    require(refs[s].trajectory_count() > 0, ErrorCode::insufficient_data,
            "subject " + std::to_string(s) + " has no reference trajectories");

  net.set_velocity_scale(reference_velocity_scale(refs));
  Adam adam(net.parameter_count(), AdamConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_subject(0, refs.size() - 1);
  std::uniform_real_distribution<double> pick_time(0.0, 1.0);

  FlowTrainResult result;
  result.loss_trace.reserve(cfg.iters);
  std::vector<FlowSample> batch(cfg.batch);
  std::vector<double> grad;
  for (int it = 0; it < cfg.iters; ++it) {
    const std::size_t s = pick_subject(rng);
    std::uniform_int_distribution<std::size_t> pick_traj(0, refs[s].trajectory_count() - 1);
    for (auto& sample : batch) {
      const std::size_t traj = pick_traj(rng);
      const double t = pick_time(rng);
      sample = refs[s].interpolate(traj, t);
      sample.subject = s;
    }
    const double loss = flow_matching_loss(net, batch, conds, &grad);
    if (!std::isfinite(loss))
      fail(ErrorCode::divergence, "flow matching loss became non-finite at iteration " + std::to_string(it));
    result.loss_trace.push_back(loss);
    if (cfg.cosine_decay) adam.set_lr(cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.iters)));
    adam.step(net.parameters(), grad);
  }
  result.net = std::move(net);
  return result;
}

}  // namespace cof
