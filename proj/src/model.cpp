#include "gridtvc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "gridtvc/rng.hpp"

namespace gridtvc {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using WMap = Eigen::Map<const RowMat>;
using GMap = Eigen::Map<RowMat>;
using BMap = Eigen::Map<const Eigen::RowVectorXd>;
using GBMap = Eigen::Map<Eigen::RowVectorXd>;
using nlohmann::json;

int ModelConfig::steps() const { return static_cast<int>(std::lround(1.0 / dt)); }

void ModelConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("model: " + m); };
  if (latent < 1 || encoder_out < 1) bad("widths must be >= 1");
  for (const auto* v : {&encoder_hidden, &message_hidden, &decoder_hidden})
    for (int w : *v)
      if (w < 1) bad("hidden widths must be >= 1");
  if (!(dt > 0 && dt <= 1)) bad("dt must be in (0, 1]");
  if (std::abs(steps() * dt - 1.0) > 1e-9) bad("1/dt must be an integer");
  if (!(leaky_slope > 0 && leaky_slope < 1)) bad("leaky slope must be in (0, 1)");
  if (checkpoint_every < 1) bad("checkpoint interval must be >= 1");
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"latent", c.latent},
           {"encoder_hidden", c.encoder_hidden},
           {"encoder_out", c.encoder_out},
           {"message_hidden", c.message_hidden},
           {"decoder_hidden", c.decoder_hidden},
           {"dt", c.dt},
           {"leaky_slope", c.leaky_slope},
           {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const json& j, ModelConfig& c) {
  json full;
  to_json(full, c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!full.contains(it.key()))
      throw std::invalid_argument("unknown model key " + it.key());
  c.latent = j.value("latent", c.latent);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.encoder_out = j.value("encoder_out", c.encoder_out);
  c.message_hidden = j.value("message_hidden", c.message_hidden);
  c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
  c.dt = j.value("dt", c.dt);
  c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
}

CompiledContext compile_context(const H2MGContext& x) {
  CompiledContext out;
  out.addresses = x.address_count;
  const auto& sch = schema();
  for (std::size_t s = 0; s < sch.size(); ++s) {
    auto it = x.edges.find(sch[s].name);
    if (it == x.edges.end() || it->second.empty()) continue;
    const auto& list = it->second;
    std::vector<std::size_t> order(list.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](auto a, auto b) { return list[a].id < list[b].id; });
    CompiledClass c;
    c.schema_index = s;
    c.name = sch[s].name;
    const auto nf = sch[s].features.size();
    c.features = Mat::Zero(static_cast<Eigen::Index>(list.size()),
                           static_cast<Eigen::Index>(std::max<std::size_t>(nf, 1)));
    c.ports.assign(sch[s].ports.size(), std::vector<Address>(list.size()));
    for (std::size_t r = 0; r < order.size(); ++r) {
      const auto& e = list[order[r]];
      c.ids.push_back(e.id);
      if (nf == 0) c.features(static_cast<Eigen::Index>(r), 0) = 1.0;
      for (std::size_t f = 0; f < nf && f < e.features.size(); ++f)
        c.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(f)) =
            e.features[f].value_or(0.0);
      for (std::size_t p = 0; p < c.ports.size(); ++p) {
        if (p >= e.ports.size() || e.ports[p] >= x.address_count)
          throw SchemaError(e.id + ": bad port address");
        c.ports[p][r] = e.ports[p];
      }
    }
    out.classes.push_back(std::move(c));
  }
  return out;
}

namespace {

std::string_view decoder_class_for(ControllerClass c) {
  return controller_class_name(c);
}

int decision_width(const ClassSchema& s) {
  if (s.decision == DecisionKind::none) return 0;
  return s.decision == DecisionKind::categorical ? kRtcCategories : 1;
}

std::vector<std::size_t> port_name_order(const ClassSchema& s) {
  std::vector<std::size_t> o(s.ports.size());
  std::iota(o.begin(), o.end(), 0);
  std::sort(o.begin(), o.end(),
            [&](auto a, auto b) { return s.ports[a] < s.ports[b]; });
  return o;
}

void leaky_inplace(Mat& m, double slope) {
  m = m.unaryExpr([slope](double v) { return v > 0 ? v : slope * v; });
}

// d <- d * leaky'(a), a being the post-activation value.
void leaky_grad_inplace(Mat& d, const Mat& a, double slope) {
  d = d.binaryExpr(a, [slope](double g, double v) { return v > 0 ? g : slope * g; });
}

}  // namespace

H2mgNode::Mlp H2mgNode::add_mlp(const std::string& prefix, int in,
                                const std::vector<int>& hidden, int out,
                                bool activate_output) {
  Mlp m;
  m.activate_output = activate_output;
  std::vector<int> widths{in};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(out);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    Layer L;
    L.in = widths[l];
    L.out = widths[l + 1];
    std::string base = prefix + ".layer" + std::to_string(l);
    L.w = size_;
    blocks_.push_back({base + ".weight", size_, L.out, L.in});
    size_ += static_cast<std::size_t>(L.out) * L.in;
    L.b = size_;
    blocks_.push_back({base + ".bias", size_, 1, L.out});
    size_ += static_cast<std::size_t>(L.out);
    m.layers.push_back(L);
  }
  return m;
}

H2mgNode::H2mgNode(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int d = cfg_.latent;
  const int eo = cfg_.encoder_out;
  for (const auto& s : schema()) {
    ClassNet net;
    const int nf = std::max<int>(1, static_cast<int>(s.features.size()));
    const int np = static_cast<int>(s.ports.size());
    net.encoder = add_mlp("encoder." + s.name, nf, cfg_.encoder_hidden, eo, false);
    for (const auto& p : s.ports)
      net.messages.push_back(add_mlp("message." + s.name + "." + p, np * d + eo,
                                     cfg_.message_hidden, d, false));
    net.decision_width = decision_width(s);
    net.port_order = port_name_order(s);
    nets_.push_back(std::move(net));
  }
  dynamics_ = add_mlp("dynamics", 2 * d, {}, d, true);
  for (ControllerClass c : kControllerClasses) {
    const auto& s = class_schema(decoder_class_for(c));
    auto idx = static_cast<std::size_t>(&s - schema().data());
    auto& net = nets_[idx];
    net.has_decoder = true;
    net.decoder = add_mlp("decoder." + s.name,
                          eo + static_cast<int>(s.ports.size()) * d,
                          cfg_.decoder_hidden, net.decision_width, false);
  }
}

std::vector<double> H2mgNode::init(std::uint64_t seed,
                                   const InitOptions& opt) const {
  std::vector<double> theta(size_, 0.0);
  if (opt.zero) return theta;
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const auto& b = blocks_[k];
    if (b.rows == 1 && b.name.ends_with(".bias")) continue;
    Rng rng = make_stream(seed, {k});
    const double a = 1.0 / std::sqrt(static_cast<double>(b.cols));
    for (std::size_t i = 0; i < b.size(); ++i)
      theta[b.offset + i] = uniform(rng, -a, a);
  }
  if (opt.zero_decoder_output)
    for (const auto& net : nets_)
      if (net.has_decoder) {
        const auto& L = net.decoder.layers.back();
        std::fill_n(theta.begin() + static_cast<std::ptrdiff_t>(L.w),
                    static_cast<std::size_t>(L.in) * L.out, 0.0);
        std::fill_n(theta.begin() + static_cast<std::ptrdiff_t>(L.b), L.out, 0.0);
      }
  return theta;
}

void H2mgNode::check(const std::vector<double>& theta,
                     const CompiledContext& x) const {
  if (theta.size() != size_)
    throw std::invalid_argument("parameter vector has " +
                                std::to_string(theta.size()) + " entries, model needs " +
                                std::to_string(size_));
  for (const auto& c : x.classes) {
    const auto& L = nets_.at(c.schema_index).encoder.layers.front();
    if (c.features.cols() != L.in)
      throw SchemaError(c.name + ": feature width does not match encoder");
  }
}

void H2mgNode::mlp_forward(const double* theta, const Mlp& m, const Mat& in,
                           std::vector<Mat>& acts) const {
  acts.clear();
  acts.push_back(in);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const auto& L = m.layers[l];
    WMap w(theta + L.w, L.out, L.in);
    BMap b(theta + L.b, L.out);
    Mat z = acts.back() * w.transpose();
    z.rowwise() += b;
    if (l + 1 < m.layers.size() || m.activate_output)
      leaky_inplace(z, cfg_.leaky_slope);
    acts.push_back(std::move(z));
  }
}

void H2mgNode::mlp_backward(const double* theta, double* grad, const Mlp& m,
                            const std::vector<Mat>& acts, Mat d, Mat* d_in,
                            std::size_t stop_layer) const {
  for (std::size_t l = m.layers.size(); l-- > stop_layer;) {
    const auto& L = m.layers[l];
    if (l + 1 < m.layers.size() || m.activate_output)
      leaky_grad_inplace(d, acts[l + 1], cfg_.leaky_slope);
    GMap gw(grad + L.w, L.out, L.in);
    GBMap gb(grad + L.b, L.out);
    gw.noalias() += d.transpose() * acts[l];
    gb += d.colwise().sum();
    if (l > stop_layer || d_in) {
      WMap w(theta + L.w, L.out, L.in);
      d = d * w;
    }
  }
  if (d_in) *d_in = std::move(d);
}

Mat H2mgNode::gather(const CompiledClass& c, const Mat& h) const {
  const int d = cfg_.latent;
  const auto n = static_cast<Eigen::Index>(c.ids.size());
  Mat out(n, static_cast<Eigen::Index>(c.ports.size()) * d);
  for (std::size_t p = 0; p < c.ports.size(); ++p)
    for (Eigen::Index e = 0; e < n; ++e)
      out.block(e, static_cast<Eigen::Index>(p) * d, 1, d) =
          h.row(c.ports[p][static_cast<std::size_t>(e)]);
  return out;
}

void H2mgNode::encode(const double* theta, const CompiledContext& x,
                      ForwardTape& tape) const {
  const int eo = cfg_.encoder_out;
  tape.encoder.assign(x.classes.size(), {});
  tape.message_x.assign(x.classes.size(), {});
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
    const auto& c = x.classes[ci];
    const auto& net = nets_[c.schema_index];
    mlp_forward(theta, net.encoder, c.features, tape.encoder[ci]);
    const Mat& xt = tape.encoder[ci].back();
    // Constant part of every message MLP's first layer.
    for (const auto& m : net.messages) {
      const auto& L = m.layers.front();
      WMap w(theta + L.w, L.out, L.in);
      Mat p = xt * w.rightCols(eo).transpose();
      p.rowwise() += BMap(theta + L.b, L.out);
      tape.message_x[ci].push_back(std::move(p));
    }
  }
}

struct H2mgNode::StepState {
  Mat h;      // latents entering the step
  Mat t;      // tanh of the summed messages
  Mat f_out;  // F output
  std::vector<Mat> h_cat;                      // per class
  std::vector<std::vector<std::vector<Mat>>> acts;  // [class][port] layer I/O
};

void H2mgNode::step(const double* theta, const CompiledContext& x,
                    const ForwardTape& tape, const Mat& h, Mat& h_next,
                    StepState* keep) const {
  const int d = cfg_.latent;
  const auto A = static_cast<Eigen::Index>(x.addresses);
  Mat s = Mat::Zero(A, d);
  if (keep) {
    keep->h_cat.assign(x.classes.size(), {});
    keep->acts.assign(x.classes.size(), {});
  }
  std::vector<Mat> outs;
  std::vector<Mat> acts;
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
    const auto& c = x.classes[ci];
    const auto& net = nets_[c.schema_index];
    Mat hc = gather(c, h);
    const auto hw = hc.cols();
    outs.assign(net.messages.size(), {});
    if (keep) keep->acts[ci].assign(net.messages.size(), {});
    for (std::size_t o = 0; o < net.messages.size(); ++o) {
      const auto& m = net.messages[o];
      const auto& L0 = m.layers.front();
      WMap w0(theta + L0.w, L0.out, L0.in);
      Mat z = hc * w0.leftCols(hw).transpose() + tape.message_x[ci][o];
      if (m.layers.size() > 1 || m.activate_output) leaky_inplace(z, cfg_.leaky_slope);
      acts.clear();
      acts.push_back(Mat());  // layer-0 input lives in h_cat
      acts.push_back(std::move(z));
      for (std::size_t l = 1; l < m.layers.size(); ++l) {
        const auto& L = m.layers[l];
        WMap w(theta + L.w, L.out, L.in);
        Mat y = acts.back() * w.transpose();
        y.rowwise() += BMap(theta + L.b, L.out);
        if (l + 1 < m.layers.size() || m.activate_output)
          leaky_inplace(y, cfg_.leaky_slope);
        acts.push_back(std::move(y));
      }
      outs[o] = acts.back();
      if (keep) keep->acts[ci][o] = std::move(acts);
    }
    // Fixed aggregation order: class name, edge id, port name.
    for (std::size_t e = 0; e < c.ids.size(); ++e)
      for (std::size_t o : net.port_order)
        s.row(c.ports[o][e]) += outs[o].row(static_cast<Eigen::Index>(e));
    if (keep) keep->h_cat[ci] = std::move(hc);
  }
  Mat t = s.array().tanh().matrix();
  const auto& L = dynamics_.layers.front();
  WMap w(theta + L.w, L.out, L.in);
  Mat f = h * w.leftCols(d).transpose() + t * w.rightCols(d).transpose();
  f.rowwise() += BMap(theta + L.b, L.out);
  leaky_inplace(f, cfg_.leaky_slope);
  h_next = h + cfg_.dt * f;
  if (keep) {
    keep->h = h;
    keep->t = std::move(t);
    keep->f_out = std::move(f);
  }
}

void H2mgNode::run(const double* theta, const CompiledContext& x,
                   ForwardTape& tape) const {
  encode(theta, x, tape);
  const int n = cfg_.steps();
  const int K = cfg_.checkpoint_every;
  Mat h = Mat::Zero(static_cast<Eigen::Index>(x.addresses), cfg_.latent);
  Mat next;
  tape.checkpoints.clear();
  for (int k = 0; k < n; ++k) {
    if (k % K == 0) tape.checkpoints.push_back(h);
    step(theta, x, tape, h, next, nullptr);
    h.swap(next);
  }
  tape.h_final = std::move(h);
}

SurrogateDecision H2mgNode::forward(const std::vector<double>& theta,
                                    const CompiledContext& x,
                                    ForwardTape* tape) const {
  check(theta, x);
  ForwardTape local;
  ForwardTape& tp = tape ? *tape : local;
  run(theta.data(), x, tp);
  SurrogateDecision z;
  std::vector<Mat> acts;
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
    const auto& c = x.classes[ci];
    const auto& net = nets_[c.schema_index];
    if (!net.has_decoder) continue;
    Mat in(static_cast<Eigen::Index>(c.ids.size()),
           cfg_.encoder_out + static_cast<Eigen::Index>(c.ports.size()) * cfg_.latent);
    in << tp.encoder[ci].back(), gather(c, tp.h_final);
    mlp_forward(theta.data(), net.decoder, in, acts);
    const Mat& out = acts.back();
    for (std::size_t e = 0; e < c.ids.size(); ++e) {
      const auto r = static_cast<Eigen::Index>(e);
      const auto& id = c.ids[e];
      if (c.name == cls::line_controller) z.line[id] = out(r, 0);
      else if (c.name == cls::shunt_controller) z.shunt[id] = out(r, 0);
      else if (c.name == cls::svr_controller) z.svr[id] = out(r, 0);
      else {
        RtcLogits v;
        for (int j = 0; j < kRtcCategories; ++j) v[j] = out(r, j);
        z.rtc[id] = v;
      }
    }
  }
  return z;
}

std::vector<double> H2mgNode::vjp(const std::vector<double>& theta,
                                  const CompiledContext& x,
                                  const SurrogateDecision& cot,
                                  const ForwardTape* tape) const {
  check(theta, x);
  const double* th = theta.data();
  ForwardTape local;
  if (!tape) {
    run(th, x, local);
    tape = &local;
  }
  std::vector<double> grad(size_, 0.0);
  double* g = grad.data();
  const int d = cfg_.latent;
  const int eo = cfg_.encoder_out;
  const double slope = cfg_.leaky_slope;
  const auto A = static_cast<Eigen::Index>(x.addresses);

  Mat lambda = Mat::Zero(A, d);
  std::vector<Mat> dxt(x.classes.size());
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci)
    dxt[ci] = Mat::Zero(static_cast<Eigen::Index>(x.classes[ci].ids.size()), eo);

  auto scatter = [&](const CompiledClass& c, const Mat& dh, Eigen::Index col0) {
    for (std::size_t p = 0; p < c.ports.size(); ++p)
      for (std::size_t e = 0; e < c.ids.size(); ++e)
        lambda.row(c.ports[p][e]) +=
            dh.block(static_cast<Eigen::Index>(e), col0 + static_cast<Eigen::Index>(p) * d, 1, d);
  };

  // Decoders.
  std::size_t matched = 0;
  std::vector<Mat> acts;
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
    const auto& c = x.classes[ci];
    const auto& net = nets_[c.schema_index];
    if (!net.has_decoder) continue;
    const auto n = static_cast<Eigen::Index>(c.ids.size());
    Mat dz(n, net.decision_width);
    for (std::size_t e = 0; e < c.ids.size(); ++e) {
      const auto r = static_cast<Eigen::Index>(e);
      const auto& id = c.ids[e];
      auto need = [&](const auto& m) -> const auto& {
        auto it = m.find(id);
        if (it == m.end()) throw std::invalid_argument("cotangent lacks " + id);
        ++matched;
        return it->second;
      };
      if (c.name == cls::line_controller) dz(r, 0) = need(cot.line);
      else if (c.name == cls::shunt_controller) dz(r, 0) = need(cot.shunt);
      else if (c.name == cls::svr_controller) dz(r, 0) = need(cot.svr);
      else {
        const auto& v = need(cot.rtc);
        for (int j = 0; j < kRtcCategories; ++j) dz(r, j) = v[j];
      }
    }
    Mat in(n, eo + static_cast<Eigen::Index>(c.ports.size()) * d);
    in << tape->encoder[ci].back(), gather(c, tape->h_final);
    mlp_forward(th, net.decoder, in, acts);
    Mat din;
    mlp_backward(th, g, net.decoder, acts, std::move(dz), &din);
    dxt[ci] += din.leftCols(eo);
    scatter(c, din, eo);
  }
  if (matched != cot.size())
    throw std::invalid_argument("cotangent has entries for unknown controllers");

  // Euler steps in reverse, one checkpointed segment at a time.
  std::vector<std::vector<Mat>> s1(x.classes.size());
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci)
    for (const auto& m : nets_[x.classes[ci].schema_index].messages)
      s1[ci].push_back(Mat::Zero(static_cast<Eigen::Index>(x.classes[ci].ids.size()),
                                 m.layers.front().out));
  const int n = cfg_.steps();
  const int K = cfg_.checkpoint_every;
  const auto& LF = dynamics_.layers.front();
  WMap wf(th + LF.w, LF.out, LF.in);
  GMap gwf(g + LF.w, LF.out, LF.in);
  GBMap gbf(g + LF.b, LF.out);
  std::vector<StepState> seg;
  Mat next;
  for (int s0 = ((n - 1) / K) * K; s0 >= 0; s0 -= K) {
    const int s1e = std::min(n, s0 + K);
    seg.assign(static_cast<std::size_t>(s1e - s0), {});
    Mat h = tape->checkpoints.at(static_cast<std::size_t>(s0 / K));
    for (int k = s0; k < s1e; ++k) {
      step(th, x, *tape, h, next, &seg[static_cast<std::size_t>(k - s0)]);
      h.swap(next);
    }
    for (int k = s1e - 1; k >= s0; --k) {
      StepState& st = seg[static_cast<std::size_t>(k - s0)];
      Mat df = cfg_.dt * lambda;
      leaky_grad_inplace(df, st.f_out, slope);
      gwf.leftCols(d).noalias() += df.transpose() * st.h;
      gwf.rightCols(d).noalias() += df.transpose() * st.t;
      gbf += df.colwise().sum();
      lambda.noalias() += df * wf.leftCols(d);
      Mat ds = (df * wf.rightCols(d)).cwiseProduct(
          (1.0 - st.t.array().square()).matrix());
      for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
        const auto& c = x.classes[ci];
        const auto& net = nets_[c.schema_index];
        const auto ne = static_cast<Eigen::Index>(c.ids.size());
        const Mat& hc = st.h_cat[ci];
        for (std::size_t o = 0; o < net.messages.size(); ++o) {
          const auto& m = net.messages[o];
          Mat dout(ne, d);
          for (std::size_t e = 0; e < c.ids.size(); ++e)
            dout.row(static_cast<Eigen::Index>(e)) = ds.row(c.ports[o][e]);
          const auto& ac = st.acts[ci][o];
          Mat d1;
          mlp_backward(th, g, m, ac, std::move(dout), &d1, 1);
          if (m.layers.size() > 1 || m.activate_output)
            leaky_grad_inplace(d1, ac[1], slope);
          const auto& L0 = m.layers.front();
          GMap gw0(g + L0.w, L0.out, L0.in);
          WMap w0(th + L0.w, L0.out, L0.in);
          gw0.leftCols(hc.cols()).noalias() += d1.transpose() * hc;
          s1[ci][o] += d1;
          Mat dh = d1 * w0.leftCols(hc.cols());
          scatter(c, dh, 0);
        }
      }
      st = StepState();
    }
  }

  // Message first layers, constant x~ part, then encoders.
  for (std::size_t ci = 0; ci < x.classes.size(); ++ci) {
    const auto& c = x.classes[ci];
    const auto& net = nets_[c.schema_index];
    const Mat& xt = tape->encoder[ci].back();
    for (std::size_t o = 0; o < net.messages.size(); ++o) {
      const auto& L0 = net.messages[o].layers.front();
      GMap gw0(g + L0.w, L0.out, L0.in);
      WMap w0(th + L0.w, L0.out, L0.in);
      gw0.rightCols(eo).noalias() += s1[ci][o].transpose() * xt;
      GBMap(g + L0.b, L0.out) += s1[ci][o].colwise().sum();
      dxt[ci].noalias() += s1[ci][o] * w0.rightCols(eo);
    }
    mlp_backward(th, g, net.encoder, tape->encoder[ci], dxt[ci], nullptr);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Checkpoints

json checkpoint_to_json(const H2mgNode& net, const Checkpoint& c) {
  if (c.theta.size() != net.size())
    throw std::invalid_argument("checkpoint parameters do not match model");
  json params = json::object();
  for (const auto& b : net.blocks()) {
    auto first = c.theta.begin() + static_cast<std::ptrdiff_t>(b.offset);
    params[b.name] = {{"shape", {b.rows, b.cols}},
                      {"values", std::vector<double>(first, first + static_cast<std::ptrdiff_t>(b.size()))}};
  }
  return json{{"format", "gridtvc-checkpoint"},
              {"version", 1},
              {"model", c.model},
              {"seed", c.seed},
              {"schema_hash", c.schema_hash},
              {"normalizer_hash", c.normalizer_hash},
              {"extra", c.extra},
              {"parameters", std::move(params)}};
}

Checkpoint checkpoint_from_json(const json& doc) {
  if (doc.value("format", "") != "gridtvc-checkpoint")
    throw SchemaError("not a gridtvc checkpoint");
  Checkpoint c;
  c.model = doc.at("model").get<ModelConfig>();
  c.seed = doc.at("seed").get<std::uint64_t>();
  c.schema_hash = doc.at("schema_hash").get<std::uint64_t>();
  c.normalizer_hash = doc.at("normalizer_hash").get<std::uint64_t>();
  c.extra = doc.value("extra", json::object());
  if (c.schema_hash != schema_hash())
    throw SchemaError("checkpoint was written for a different schema");
  H2mgNode net(c.model);
  c.theta.assign(net.size(), 0.0);
  const auto& params = doc.at("parameters");
  if (params.size() != net.blocks().size())
    throw SchemaError("checkpoint parameter blocks do not match the model");
  for (const auto& b : net.blocks()) {
    const auto& p = params.at(b.name);
    if (p.at("shape") != json{b.rows, b.cols})
      throw SchemaError(b.name + ": shape mismatch");
    const auto& v = p.at("values");
    if (v.size() != b.size()) throw SchemaError(b.name + ": value count mismatch");
    for (std::size_t i = 0; i < b.size(); ++i) c.theta[b.offset + i] = v[i].get<double>();
  }
  return c;
}

void save_checkpoint(const H2mgNode& net, const Checkpoint& c,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << checkpoint_to_json(net, c).dump() << '\n';
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return checkpoint_from_json(json::parse(in));
}

}  // namespace gridtvc
