#include "anyi2v/backbone.hpp"
#include "anyi2v/noise_schedule.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "anyi2v/random.hpp"
#include "anyi2v/rtd.hpp"

namespace anyi2v {

// ---------------------------------------------------------------------------
// Tap addresses

namespace {

constexpr std::string_view stage_name(Stage s) {
    switch (s) {
        case Stage::Down: return "down";
        case Stage::Mid: return "mid";
        case Stage::Up: return "up";
    }
    return "?";
}

constexpr std::string_view kind_name(TapKind k) {
    switch (k) {
        case TapKind::ResidualHidden: return "res";
        case TapKind::Query: return "q";
        case TapKind::Key: return "k";
        case TapKind::Value: return "v";
        case TapKind::AttentionMap: return "attn";
    }
    return "?";
}

int parse_index(std::string_view s, std::string_view whole) {
    if (s.empty() || s.size() > 3 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw InputError("bad tap address '" + std::string(whole) + "'");
    }
    return std::stoi(std::string(s));
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

}  // namespace

std::string to_string(const TapAddress& a) {
    std::ostringstream os;
    os << stage_name(a.stage) << '.' << a.block << '.' << kind_name(a.kind) << '.' << a.layer;
    return os.str();
}

TapAddress parse_tap_address(std::string_view text) {
    const std::string_view whole = trim(text);
    std::vector<std::string_view> parts;
    std::string_view rest = whole;
    while (true) {
        const auto dot = rest.find('.');
        parts.push_back(rest.substr(0, dot));
        if (dot == std::string_view::npos) break;
        rest.remove_prefix(dot + 1);
    }
    if (parts.size() != 4) throw InputError("bad tap address '" + std::string(whole) + "'");
    TapAddress a;
    if (parts[0] == "down") a.stage = Stage::Down;
    else if (parts[0] == "mid") a.stage = Stage::Mid;
    else if (parts[0] == "up") a.stage = Stage::Up;
    else throw InputError("bad tap stage in '" + std::string(whole) + "'");
    a.block = parse_index(parts[1], whole);
    if (parts[2] == "res") a.kind = TapKind::ResidualHidden;
    else if (parts[2] == "q") a.kind = TapKind::Query;
    else if (parts[2] == "k") a.kind = TapKind::Key;
    else if (parts[2] == "v") a.kind = TapKind::Value;
    else if (parts[2] == "attn") a.kind = TapKind::AttentionMap;
    else throw InputError("bad tap kind in '" + std::string(whole) + "'");
    a.layer = parse_index(parts[3], whole);
    return a;
}

std::vector<TapAddress> parse_tap_list(std::string_view text) {
    std::vector<TapAddress> out;
    while (!text.empty()) {
        const auto comma = text.find(',');
        const auto item = trim(text.substr(0, comma));
        if (!item.empty()) out.push_back(parse_tap_address(item));
        if (comma == std::string_view::npos) break;
        text.remove_prefix(comma + 1);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config

void BackboneConfig::validate() const {
    if (latent_channels < 1 || base_width < 1 || num_down_blocks < 1 || attn_heads < 1 || frames < 1 ||
        height < 1 || width < 1 || up_layers < 1 || cond_tokens < 1 || cond_dim < 1) {
        throw InputError("backbone config has a non-positive size");
    }
    const int div = 1 << (num_down_blocks - 1);
    if (height % div != 0 || width % div != 0) {
        throw InputError("latent " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by " +
                         std::to_string(div) + " for " + std::to_string(num_down_blocks) + " down blocks");
    }
    for (int l = 0; l < num_down_blocks; ++l) {
        if (width_at(l) % attn_heads != 0) throw InputError("channel width not divisible by attn_heads");
    }
    if (up_layers < 2) throw InputError("up blocks need at least 2 layers (query index 1 is addressable)");
    Schedule::linear(train_steps, beta_start, beta_end);
}

int BackboneConfig::width_at(int level) const {
    return level == 0 ? base_width : 2 * base_width;
}

std::string BackboneConfig::to_text() const {
    std::ostringstream os;
    os << "latent_channels=" << latent_channels << '\n'
       << "base_width=" << base_width << '\n'
       << "num_down_blocks=" << num_down_blocks << '\n'
       << "attn_heads=" << attn_heads << '\n'
       << "frames=" << frames << '\n'
       << "height=" << height << '\n'
       << "width=" << width << '\n'
       << "seed=" << seed << '\n'
       << "temporal_enabled=" << (temporal_enabled ? 1 : 0) << '\n'
       << "up_layers=" << up_layers << '\n'
       << "cond_tokens=" << cond_tokens << '\n'
       << "cond_dim=" << cond_dim << '\n';
    os.precision(17);
    os << "temporal_init_scale=" << temporal_init_scale << '\n'
       << "train_steps=" << train_steps << '\n'
       << "beta_start=" << beta_start << '\n'
       << "beta_end=" << beta_end << '\n';
    return os.str();
}

BackboneConfig BackboneConfig::from_text(std::string_view text) {
    BackboneConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        const auto l = trim(line);
        if (l.empty() || l.front() == '#') continue;
        const auto eq = l.find('=');
        if (eq == std::string_view::npos) throw InputError("config line without '=': " + std::string(l));
        const std::string key(trim(l.substr(0, eq)));
        const std::string val(trim(l.substr(eq + 1)));
        try {
            if (key == "latent_channels") c.latent_channels = std::stoi(val);
            else if (key == "base_width") c.base_width = std::stoi(val);
            else if (key == "num_down_blocks") c.num_down_blocks = std::stoi(val);
            else if (key == "attn_heads") c.attn_heads = std::stoi(val);
            else if (key == "frames") c.frames = std::stoi(val);
            else if (key == "height") c.height = std::stoi(val);
            else if (key == "width") c.width = std::stoi(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "temporal_enabled") c.temporal_enabled = std::stoi(val) != 0;
            else if (key == "up_layers") c.up_layers = std::stoi(val);
            else if (key == "cond_tokens") c.cond_tokens = std::stoi(val);
            else if (key == "cond_dim") c.cond_dim = std::stoi(val);
            else if (key == "temporal_init_scale") c.temporal_init_scale = std::stod(val);
            else if (key == "train_steps") c.train_steps = std::stoi(val);
            else if (key == "beta_start") c.beta_start = std::stod(val);
            else if (key == "beta_end") c.beta_end = std::stod(val);
            else throw InputError("unknown config key '" + key + "'");
        } catch (const std::logic_error&) {
            throw InputError("bad value for config key '" + key + "'");
        }
    }
    c.validate();
    return c;
}

template <typename T>
const BasicTensor<T>& FeatureBundle<T>::at(const TapAddress& address) const {
    auto it = taps.find(address);
    if (it == taps.end()) throw InputError("feature bundle has no tap " + to_string(address));
    return it->second;
}

// ---------------------------------------------------------------------------
// Layer plan

namespace {

struct LayerSpec {
    Stage stage;
    int block;
    int layer;
    int level;  // resolution level: grid is (H >> level, W >> level)
    int c_in;   // after the skip concatenation, when there is one
    int c_out;
    bool takes_skip;

    std::string prefix() const {
        return std::string(stage_name(stage)) + "." + std::to_string(block) + ".layer" + std::to_string(layer);
    }
};

std::vector<LayerSpec> layer_plan(const BackboneConfig& c) {
    std::vector<LayerSpec> plan;
    const int D = c.num_down_blocks;
    int ch = c.width_at(0);
    for (int d = 0; d < D; ++d) {
        plan.push_back({Stage::Down, d, 0, d, ch, c.width_at(d), false});
        ch = c.width_at(d);
    }
    plan.push_back({Stage::Mid, 0, 0, D - 1, ch, ch, false});
    for (int u = 0; u < D; ++u) {
        const int level = D - 1 - u;
        for (int l = 0; l < c.up_layers; ++l) {
            const bool skip = l == 0;
            const int cin = skip ? ch + c.width_at(level) : ch;
            plan.push_back({Stage::Up, u, l, level, cin, c.width_at(level), skip});
            ch = c.width_at(level);
        }
    }
    return plan;
}

int emb_dim(const BackboneConfig& c) { return 4 * c.base_width; }

const LayerSpec* find_layer(const std::vector<LayerSpec>& plan, const TapAddress& a) {
    for (const auto& s : plan) {
        if (s.stage == a.stage && s.block == a.block && s.layer == a.layer) return &s;
    }
    return nullptr;
}

}  // namespace

std::vector<double> timestep_features(int t, int dim) {
    const int half = dim / 2;
    std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = std::cos(t * freq);
        out[half + i] = std::sin(t * freq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Construction

Backbone<float> build_backbone(const BackboneConfig& cfg) {
    cfg.validate();
    Backbone<float> bb;
    bb.cfg_ = cfg;
    auto add = [&](const std::string& path, Shape shape, std::size_t fan_in, double gain = 1.0) {
        const std::size_t n = numel(shape);
        CounterRng rng(cfg.seed, "weights/" + path);
        bb.params_.emplace(path, Tensor(std::move(shape), rng.normals(n, gain / std::sqrt(double(fan_in)))));
    };
    auto zeros = [&](const std::string& path, Shape shape) { bb.params_.emplace(path, Tensor(std::move(shape))); };
    auto conv = [&](const std::string& p, std::size_t co, std::size_t ci, std::size_t k, double gain = 1.0) {
        add(p + ".weight", {co, ci, k, k}, ci * k * k, gain);
        zeros(p + ".bias", {co});
    };
    auto linear = [&](const std::string& p, std::size_t in, std::size_t out, double gain = 1.0) {
        add(p + ".weight", {in, out}, in, gain);
    };

    const std::size_t E = static_cast<std::size_t>(emb_dim(cfg));
    const std::size_t B = static_cast<std::size_t>(cfg.base_width);
    const std::size_t L = static_cast<std::size_t>(cfg.latent_channels);
    conv("conv_in", static_cast<std::size_t>(cfg.width_at(0)), L, 3);
    add("time.lin1.weight", {B, E}, B);
    zeros("time.lin1.bias", {E});
    add("time.lin2.weight", {E, E}, E);
    zeros("time.lin2.bias", {E});
    for (const auto& s : layer_plan(cfg)) {
        const std::string p = s.prefix();
        const auto ci = static_cast<std::size_t>(s.c_in);
        const auto co = static_cast<std::size_t>(s.c_out);
        conv(p + ".res.conv1", co, ci, 3);
        add(p + ".res.temb.weight", {E, co}, E);
        zeros(p + ".res.temb.bias", {co});
        conv(p + ".res.conv2", co, co, 3);
        if (ci != co) conv(p + ".res.skip", co, ci, 1);
        for (const char* n : {"q", "k", "v", "o"}) linear(p + ".attn." + n, co, co);
        linear(p + ".cross.q", co, co);
        linear(p + ".cross.k", static_cast<std::size_t>(cfg.cond_dim), co);
        linear(p + ".cross.v", static_cast<std::size_t>(cfg.cond_dim), co);
        linear(p + ".cross.o", co, co);
        for (const char* n : {"q", "k", "v"}) linear(p + ".temporal." + n, co, co);
        linear(p + ".temporal.o", co, co, cfg.temporal_init_scale);
    }
    conv("conv_out", L, static_cast<std::size_t>(cfg.width_at(0)), 3);
    return bb;
}

template <typename T>
const BasicTensor<T>& Backbone<T>::param(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw Error("missing backbone parameter " + path);
    return it->second;
}

template <typename T>
std::uint64_t Backbone<T>::checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [k, v] : params_) {
        mix(k.data(), k.size());
        mix(v.data().data(), v.numel() * sizeof(T));
    }
    return h;
}

template <typename T>
std::vector<TapAddress> Backbone<T>::sites() const {
    std::vector<TapAddress> out;
    for (const auto& s : layer_plan(cfg_)) {
        for (TapKind k : {TapKind::ResidualHidden, TapKind::Query, TapKind::Key, TapKind::Value,
                          TapKind::AttentionMap}) {
            out.push_back({s.stage, s.block, k, s.layer});
        }
    }
    return out;
}

template <typename T>
bool Backbone<T>::resolves(const TapAddress& a) const {
    return find_layer(layer_plan(cfg_), a) != nullptr;
}

template <typename T>
std::pair<std::size_t, std::size_t> Backbone<T>::site_grid(const TapAddress& a) const {
    const auto plan = layer_plan(cfg_);
    const LayerSpec* s = find_layer(plan, a);
    if (s == nullptr) throw InputError("unresolvable tap address " + to_string(a));
    return {static_cast<std::size_t>(cfg_.height >> s->level), static_cast<std::size_t>(cfg_.width >> s->level)};
}

template <typename T>
Shape Backbone<T>::site_shape(const TapAddress& a, std::size_t frames) const {
    const auto plan = layer_plan(cfg_);
    const LayerSpec* s = find_layer(plan, a);
    if (s == nullptr) throw InputError("unresolvable tap address " + to_string(a));
    const auto h = static_cast<std::size_t>(cfg_.height >> s->level);
    const auto w = static_cast<std::size_t>(cfg_.width >> s->level);
    const auto c = static_cast<std::size_t>(s->c_out);
    switch (a.kind) {
        case TapKind::ResidualHidden: return {frames, c, h, w};
        case TapKind::Query:
        case TapKind::Key:
        case TapKind::Value: return {frames, h * w, c};
        case TapKind::AttentionMap: return {frames, static_cast<std::size_t>(cfg_.attn_heads), h * w, h * w};
    }
    return {};
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
AttentionTrace<T> spatial_self_attention(const BasicTensor<T>& x, const BasicTensor<T>& wq,
                                         const BasicTensor<T>& wk, const BasicTensor<T>& wv,
                                         const BasicTensor<T>& wo, int heads,
                                         const std::function<BasicTensor<T>(TapKind, const BasicTensor<T>&)>& substitute) {
    if (x.rank() != 3) throw ShapeError("spatial_self_attention expects [f, tokens, C]");
    const std::size_t f = x.dim(0), n = x.dim(1), c = x.dim(2);
    const auto h = static_cast<std::size_t>(heads);
    if (c % h != 0) throw ShapeError("channels not divisible by heads");
    const std::size_t d = c / h;
    AttentionTrace<T> tr;
    tr.query = matmul(x, wq);
    tr.key = matmul(x, wk);
    tr.value = matmul(x, wv);
    if (substitute) {
        tr.query = substitute(TapKind::Query, tr.query);
        tr.key = substitute(TapKind::Key, tr.key);
        tr.value = substitute(TapKind::Value, tr.value);
    }
    auto split = [&](const BasicTensor<T>& t) { return permute(reshape(t, {f, n, h, d}), {0, 2, 1, 3}); };
    const auto qh = split(tr.query);
    const auto kh = split(tr.key);
    const auto vh = split(tr.value);
    const auto scores = scale(matmul(qh, permute(kh, {0, 1, 3, 2})), 1.0 / std::sqrt(double(d)));
    tr.map = softmax(scores, 3);
    const auto mixed = reshape(permute(matmul(tr.map, vh), {0, 2, 1, 3}), {f, n, c});
    tr.output = matmul(mixed, wo);
    return tr;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
    return add(matmul(x, w), b);
}

// [f, C, H, W] <-> [f, HW, C]
template <typename T>
BasicTensor<T> to_tokens(const BasicTensor<T>& x) {
    const std::size_t f = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    return permute(reshape(x, {f, c, hw}), {0, 2, 1});
}

template <typename T>
BasicTensor<T> from_tokens(const BasicTensor<T>& t, std::size_t h, std::size_t w) {
    const std::size_t f = t.dim(0), c = t.dim(2);
    return reshape(permute(t, {0, 2, 1}), {f, c, h, w});
}

template <typename T>
BasicTensor<T> repeat_first_frame(const BasicTensor<T>& x) {
    const std::size_t f = x.dim(0);
    if (f == 1) return x;
    const auto first = slice(x, 0, 0, 1);
    return concat(std::vector<BasicTensor<T>>(f, first), 0);
}

}  // namespace

template <typename T>
ForwardResult<T> Backbone<T>::forward(const BasicTensor<T>& z, int t, const BasicTensor<T>& cond,
                                      const ForwardOptions<T>& opt) const {
    const auto& c = cfg_;
    if (z.rank() != 4 || z.dim(1) != std::size_t(c.latent_channels) || z.dim(2) != std::size_t(c.height) ||
        z.dim(3) != std::size_t(c.width)) {
        throw ShapeError("latent shape " + to_string(z.shape()) + " does not match backbone config [f," +
                         std::to_string(c.latent_channels) + "," + std::to_string(c.height) + "," +
                         std::to_string(c.width) + "]");
    }
    if (cond.shape() != Shape{std::size_t(c.cond_tokens), std::size_t(c.cond_dim)}) {
        throw ShapeError("conditioning shape " + to_string(cond.shape()) + " does not match backbone config");
    }
    if (t < 0 || t >= c.train_steps) {
        throw InputError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(c.train_steps) + ")");
    }
    const std::size_t f = z.dim(0);
    for (const auto& a : opt.taps) {
        if (!resolves(a)) throw InputError("unresolvable tap address " + to_string(a));
    }
    for (const auto& [a, v] : opt.overrides) {
        if (!resolves(a)) throw InputError("unresolvable override address " + to_string(a));
        if (a.kind == TapKind::AttentionMap) throw InputError("attention maps are capture-only: " + to_string(a));
        if (v.shape() != site_shape(a, f)) {
            throw ShapeError("override at " + to_string(a) + " has shape " + to_string(v.shape()) + ", site is " +
                             to_string(site_shape(a, f)));
        }
    }
    const bool kv_prop = opt.kv_propagate || (opt.hook != nullptr && opt.hook->propagate_first_frame_kv());
    const bool temporal = c.temporal_enabled && !opt.disable_temporal;

    ForwardResult<T> result;
    result.bundle.timestep = t;

    auto replace = [&](const TapAddress& a, const BasicTensor<T>& live) -> BasicTensor<T> {
        if (auto it = opt.overrides.find(a); it != opt.overrides.end()) return it->second;
        if (opt.hook != nullptr) {
            BasicTensor<T> v = opt.hook->at_site(a, live);
            if (v.shape() != live.shape()) {
                throw ShapeError("hook returned shape " + to_string(v.shape()) + " at " + to_string(a));
            }
            return v;
        }
        return live;
    };
    auto capture = [&](const TapAddress& a, const BasicTensor<T>& v) {
        if (opt.taps.count(a) != 0) result.bundle.taps.insert_or_assign(a, v);
    };

    // Timestep embedding [1, E].
    const auto B = static_cast<std::size_t>(c.base_width);
    const auto tf = timestep_features(t, c.base_width);
    BasicTensor<T> temb(Shape{1, B}, std::vector<T>(tf.begin(), tf.end()));
    temb = linear(silu(linear(temb, param("time.lin1.weight"), param("time.lin1.bias"))), param("time.lin2.weight"),
                  param("time.lin2.bias"));
    const auto temb_act = silu(temb);
    auto norm = [](const BasicTensor<T>& x) { return group_norm(x, std::gcd(x.dim(1), std::size_t{8})); };

    auto run_layer = [&](const LayerSpec& s, BasicTensor<T> x) {
        const std::string p = s.prefix();
        const std::size_t hgt = x.dim(2), wid = x.dim(3);
        const auto co = static_cast<std::size_t>(s.c_out);

        // ResBlock
        auto h = conv2d(silu(norm(x)), param(p + ".res.conv1.weight"), param(p + ".res.conv1.bias"));
        const auto tproj = linear(temb_act, param(p + ".res.temb.weight"), param(p + ".res.temb.bias"));
        h = add(h, reshape(tproj, {co, 1, 1}));
        h = conv2d(silu(norm(h)), param(p + ".res.conv2.weight"), param(p + ".res.conv2.bias"));
        const auto skip = s.c_in != s.c_out ? conv2d(x, param(p + ".res.skip.weight"), param(p + ".res.skip.bias")) : x;
        h = add(h, skip);
        const TapAddress res{s.stage, s.block, TapKind::ResidualHidden, s.layer};
        h = replace(res, h);
        capture(res, h);

        // Spatial self-attention, per frame.
        auto tokens = to_tokens(h);
        auto trace = spatial_self_attention<T>(
            to_tokens(norm(h)), param(p + ".attn.q.weight"), param(p + ".attn.k.weight"), param(p + ".attn.v.weight"),
            param(p + ".attn.o.weight"), c.attn_heads, [&](TapKind kind, const BasicTensor<T>& live) {
                auto v = replace({s.stage, s.block, kind, s.layer}, live);
                if (kv_prop && (kind == TapKind::Key || kind == TapKind::Value)) v = repeat_first_frame(v);
                return v;
            });
        capture({s.stage, s.block, TapKind::Query, s.layer}, trace.query);
        capture({s.stage, s.block, TapKind::Key, s.layer}, trace.key);
        capture({s.stage, s.block, TapKind::Value, s.layer}, trace.value);
        capture({s.stage, s.block, TapKind::AttentionMap, s.layer}, trace.map);
        tokens = add(tokens, trace.output);

        // Cross-attention to the conditioning embedding, shared by all frames.
        {
            const auto q = matmul(tokens, param(p + ".cross.q.weight"));
            const auto k = matmul(cond, param(p + ".cross.k.weight"));
            const auto v = matmul(cond, param(p + ".cross.v.weight"));
            const auto w = softmax(scale(matmul(q, permute(k, {1, 0})), 1.0 / std::sqrt(double(co))), 2);
            tokens = add(tokens, matmul(matmul(w, v), param(p + ".cross.o.weight")));
        }

        // Temporal attention over the frame axis at each spatial position.
        if (temporal && f > 1) {
            const auto seq = permute(tokens, {1, 0, 2});  // [HW, f, C]
            const auto q = matmul(seq, param(p + ".temporal.q.weight"));
            const auto k = matmul(seq, param(p + ".temporal.k.weight"));
            const auto v = matmul(seq, param(p + ".temporal.v.weight"));
            const auto w = softmax(scale(matmul(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(double(co))), 2);
            const auto o = matmul(matmul(w, v), param(p + ".temporal.o.weight"));
            tokens = add(tokens, permute(o, {1, 0, 2}));
        }
        return from_tokens(tokens, hgt, wid);
    };

    const auto plan = layer_plan(c);
    auto h = conv2d(z, param("conv_in.weight"), param("conv_in.bias"));
    std::vector<BasicTensor<T>> skips(static_cast<std::size_t>(c.num_down_blocks));
    for (const auto& s : plan) {
        if (s.stage == Stage::Down) {
            h = run_layer(s, h);
            skips[static_cast<std::size_t>(s.level)] = h;
            if (s.block + 1 < c.num_down_blocks) h = avg_pool2(h);
        } else if (s.stage == Stage::Mid) {
            h = run_layer(s, h);
        } else {
            if (s.takes_skip) h = concat<T>({h, skips[static_cast<std::size_t>(s.level)]}, 1);
            h = run_layer(s, h);
            if (s.layer + 1 == c.up_layers && s.block + 1 < c.num_down_blocks) h = upsample2(h);
        }
    }
    const auto velocity = conv2d(silu(norm(h)), param("conv_out.weight"), param("conv_out.bias"));
    const double ab = Schedule::linear(c.train_steps, c.beta_start, c.beta_end).alpha_bar(t);
    result.eps = add(scale(z, std::sqrt(1.0 - ab)), scale(velocity, std::sqrt(ab)));
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const Backbone<float>& backbone, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream cfg(dir / "config.txt");
        cfg << backbone.config().to_text();
        if (!cfg) throw Error("cannot write " + (dir / "config.txt").string());
    }
    std::ofstream manifest(dir / "manifest.txt");
    for (const auto& [path, tensor] : backbone.parameters()) {
        const std::string file = path + ".rtd";
        rtd::save(dir / file, tensor);
        manifest << path << ' ' << file << '\n';
    }
    if (!manifest) throw Error("cannot write " + (dir / "manifest.txt").string());
}

Backbone<float> load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream cfg_in(dir / "config.txt");
    if (!cfg_in) throw InputError("checkpoint has no config.txt: " + dir.string());
    std::stringstream ss;
    ss << cfg_in.rdbuf();
    const BackboneConfig cfg = BackboneConfig::from_text(ss.str());
    // The reference layout tells us which parameters must be present and their shapes.
    const Backbone<float> reference = build_backbone(cfg);
    std::ifstream manifest(dir / "manifest.txt");
    if (!manifest) throw InputError("checkpoint has no manifest.txt: " + dir.string());
    Backbone<float> bb;
    bb.cfg_ = cfg;
    std::string path, file;
    while (manifest >> path >> file) {
        auto ref = reference.parameters().find(path);
        if (ref == reference.parameters().end()) throw InputError("checkpoint has unknown parameter " + path);
        Tensor t = rtd::load(dir / file);
        if (t.shape() != ref->second.shape()) throw ShapeError("checkpoint parameter " + path + " has wrong shape");
        bb.params_.insert_or_assign(path, std::move(t));
    }
    if (bb.params_.size() != reference.parameters().size()) throw InputError("checkpoint is missing parameters");
    return bb;
}

template struct FeatureBundle<float>;
template struct FeatureBundle<double>;
template class Backbone<float>;
template class Backbone<double>;
template AttentionTrace<float> spatial_self_attention<float>(
    const Tensor&, const Tensor&, const Tensor&, const Tensor&, const Tensor&, int,
    const std::function<Tensor(TapKind, const Tensor&)>&);
template AttentionTrace<double> spatial_self_attention<double>(
    const TensorD&, const TensorD&, const TensorD&, const TensorD&, const TensorD&, int,
    const std::function<TensorD(TapKind, const TensorD&)>&);

}  // namespace anyi2v
