#include "proll/unet.hpp"

#include <cmath>
#include <string>

#include "proll/errors.hpp"

namespace proll {

template <typename T>
TimeEmbeddingT<T>::TimeEmbeddingT(ParamStoreT<T>& ps, const std::string& prefix, int dim_, Rng& rng)
    : dim(dim_) {
    l1 = LinearT<T>(ps, prefix + ".l1", dim_, dim_, Init::HeNormal, rng);
    l2 = LinearT<T>(ps, prefix + ".l2", dim_, dim_, Init::GlorotUniform, rng);
}

template <typename T>
TensorT<T> TimeEmbeddingT<T>::sinusoid(const std::vector<int>& t, int dim) {
    int half = dim / 2;
    int B = static_cast<int>(t.size());
    TensorT<T> out({B, dim});
    for (int b = 0; b < B; ++b) {
        for (int k = 0; k < half; ++k) {
            double w = std::exp(-std::log(10000.0) * k / (half - 1));
            out[static_cast<size_t>(b) * dim + 2 * k] = static_cast<T>(std::sin(t[b] * w));
            out[static_cast<size_t>(b) * dim + 2 * k + 1] = static_cast<T>(std::cos(t[b] * w));
        }
    }
    return out;
}

template <typename T>
ad::VarT<T> TimeEmbeddingT<T>::operator()(const std::vector<int>& t, int max_steps) const {
    for (int ti : t)
        if (ti < 0 || ti >= max_steps)
            throw StepOutOfRange("time step " + std::to_string(ti) + " outside [0, " +
                                 std::to_string(max_steps) + ")");
    auto h = ad::constant(sinusoid(t, dim));
    return l2(ad::silu(l1(h)));
}

template <typename T>
ResBlockT<T>::ResBlockT(ParamStoreT<T>& ps, const std::string& prefix, int cin_, int cout_, int temb_dim,
                        Rng& rng)
    : cin(cin_), cout(cout_) {
    n1 = GroupNormT<T>(ps, prefix + ".norm1", cin_, norm_groups_for(cin_));
    c1 = Conv2dT<T>(ps, prefix + ".conv1", cin_, cout_, 3, Init::HeNormal, rng, 1, 1);
    temb_proj = LinearT<T>(ps, prefix + ".temb", temb_dim, cout_, Init::GlorotUniform, rng);
    n2 = GroupNormT<T>(ps, prefix + ".norm2", cout_, norm_groups_for(cout_));
    c2 = Conv2dT<T>(ps, prefix + ".conv2", cout_, cout_, 3, Init::Zero, rng, 1, 1);
    if (cin_ != cout_) skip = Conv2dT<T>(ps, prefix + ".skip", cin_, cout_, 1, Init::GlorotUniform, rng);
}

template <typename T>
ad::VarT<T> ResBlockT<T>::operator()(const ad::VarT<T>& x, const ad::VarT<T>& temb) const {
    auto h = c1(ad::silu(n1(x)));
    h = ad::add_channel_bias_bchw(h, temb_proj(ad::silu(temb)));
    h = c2(ad::silu(n2(h)));
    return ad::add(h, cin == cout ? x : skip(x));
}

template <typename T>
TransformerBlockT<T>::TransformerBlockT(ParamStoreT<T>& ps, const std::string& prefix, int channels_,
                                        int heads_, int cond_dim_, Rng& rng)
    : channels(channels_), heads(heads_), cond_dim(cond_dim_) {
    if (channels_ % heads_ != 0) throw ShapeMismatch("channels not divisible by heads");
    ln1 = LayerNormT<T>(ps, prefix + ".norm1", channels_);
    q1 = LinearT<T>(ps, prefix + ".self.q", channels_, channels_, Init::GlorotUniform, rng, false);
    k1 = LinearT<T>(ps, prefix + ".self.k", channels_, channels_, Init::GlorotUniform, rng, false);
    v1 = LinearT<T>(ps, prefix + ".self.v", channels_, channels_, Init::GlorotUniform, rng, false);
    o1 = LinearT<T>(ps, prefix + ".self.out", channels_, channels_, Init::Zero, rng);
    ln2 = LayerNormT<T>(ps, prefix + ".norm2", channels_);
    cond_proj = LinearT<T>(ps, prefix + ".cross.cond", cond_dim_, channels_, Init::GlorotUniform, rng);
    q2 = LinearT<T>(ps, prefix + ".cross.q", channels_, channels_, Init::GlorotUniform, rng, false);
    k2 = LinearT<T>(ps, prefix + ".cross.k", channels_, channels_, Init::GlorotUniform, rng, false);
    v2 = LinearT<T>(ps, prefix + ".cross.v", channels_, channels_, Init::GlorotUniform, rng, false);
    o2 = LinearT<T>(ps, prefix + ".cross.out", channels_, channels_, Init::Zero, rng);
    ln3 = LayerNormT<T>(ps, prefix + ".norm3", channels_);
    f1 = LinearT<T>(ps, prefix + ".ff1", channels_, 4 * channels_, Init::HeNormal, rng);
    f2 = LinearT<T>(ps, prefix + ".ff2", 4 * channels_, channels_, Init::Zero, rng);
}

namespace {

template <typename T>
ad::VarT<T> split_heads(const ad::VarT<T>& x, int heads) {
    // (B,L,C) -> (B,heads,L,C/heads)
    const auto& s = x->value.shape();
    int B = s[0], L = s[1], C = s[2];
    return ad::permute(ad::reshape(x, {B, L, heads, C / heads}), {0, 2, 1, 3});
}

template <typename T>
ad::VarT<T> merge_heads(const ad::VarT<T>& x) {
    const auto& s = x->value.shape();
    int B = s[0], H = s[1], L = s[2], D = s[3];
    return ad::reshape(ad::permute(x, {0, 2, 1, 3}), {B, L, H * D});
}

}  // namespace

template <typename T>
ad::VarT<T> TransformerBlockT<T>::operator()(const ad::VarT<T>& x, const ad::VarT<T>& cond) const {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != channels) throw ShapeMismatch("transformer input");
    if (cond->value.shape() != std::vector<int>{s[0], cond_dim}) throw ShapeMismatch("condition latent");
    int B = s[0], H = s[2], W = s[3], L = H * W;

    auto seq = ad::reshape(ad::permute(x, {0, 2, 3, 1}), {B, L, channels});

    auto a = ln1(seq);
    auto self_att = ad::attention(split_heads(q1(a), heads), split_heads(k1(a), heads),
                                  split_heads(v1(a), heads));
    seq = ad::add(seq, o1(merge_heads(self_att)));

    auto b = ln2(seq);
    auto tok = ad::reshape(cond_proj(cond), {B, 1, channels});  // one key/value token
    auto cross_att = ad::attention(split_heads(q2(b), heads), split_heads(k2(tok), heads),
                                   split_heads(v2(tok), heads));
    seq = ad::add(seq, o2(merge_heads(cross_att)));

    seq = ad::add(seq, f2(ad::silu(f1(ln3(seq)))));
    return ad::permute(ad::reshape(seq, {B, H, W, channels}), {0, 3, 1, 2});
}

template <typename T>
TransformerMambaT<T>::TransformerMambaT(ParamStoreT<T>& ps, const std::string& prefix, int channels_,
                                        const UNetConfig& cfg, Rng& rng)
    : mamba_enabled(cfg.enable_mamba), channels(channels_) {
    transformer = TransformerBlockT<T>(ps, prefix + ".transformer", channels_, cfg.heads, cfg.cond_dim, rng);
    if (mamba_enabled) {
        norm = LayerNormT<T>(ps, prefix + ".norm", channels_);
        mamba = MambaBlockT<T>(ps, prefix + ".mamba", channels_, rng, cfg.ssm_states);
    }
}

template <typename T>
ad::VarT<T> TransformerMambaT<T>::operator()(const ad::VarT<T>& x, const ad::VarT<T>& cond) const {
    auto y = transformer(x, cond);
    if (!mamba_enabled) return y;
    const auto& s = y->value.shape();
    int B = s[0], H = s[2], W = s[3];
    auto seq = ad::reshape(ad::permute(y, {0, 2, 3, 1}), {B, H * W, channels});
    seq = ad::add(seq, mamba(norm(seq)));
    return ad::permute(ad::reshape(seq, {B, H, W, channels}), {0, 3, 1, 2});
}

template <typename T>
UNetT<T>::UNetT(ParamStoreT<T>& ps, const UNetConfig& cfg_, Rng& rng) : cfg(cfg_) {
    int L = cfg.levels();
    if (L < 1) throw ShapeMismatch("unet needs at least one level");
    if (cfg.image_size % (1 << (L - 1)) != 0) throw OddSpatialDims("image size not divisible by 2^(levels-1)");

    temb = TimeEmbeddingT<T>(ps, "unet.temb", cfg.temb_dim, rng);
    stem = Conv2dT<T>(ps, "unet.stem", cfg.in_channels, cfg.base, 3, Init::HeNormal, rng, 1, 1);
    null_cond = &ps.add("unet.null_cond", {cfg.cond_dim});
    init_glorot_uniform(*null_cond, cfg.cond_dim, 1, rng);

    int prev = cfg.base;
    for (int i = 0; i < L; ++i) {
        int c = cfg.channels_at(i);
        std::string pre = "unet.enc" + std::to_string(i);
        enc_res.emplace_back(ps, pre + ".res", prev, c, cfg.temb_dim, rng);
        enc_tm.push_back(cfg.attn_at(i) ? std::make_unique<TransformerMambaT<T>>(ps, pre + ".tm", c, cfg, rng)
                                        : nullptr);
        if (i + 1 < L)
            down.emplace_back(ps, "unet.down" + std::to_string(i), c, c, 3, Init::HeNormal, rng, 2, 1);
        prev = c;
    }

    int cb = cfg.channels_at(L - 1);
    mid_res1 = ResBlockT<T>(ps, "unet.mid.res1", cb, cb, cfg.temb_dim, rng);
    if (cfg.attn_at(L - 1)) mid_tm = std::make_unique<TransformerMambaT<T>>(ps, "unet.mid.tm", cb, cfg, rng);
    mid_res2 = ResBlockT<T>(ps, "unet.mid.res2", cb, cb, cfg.temb_dim, rng);

    for (int i = 0; i < L; ++i) {
        skip_wtb.push_back(cfg.enable_wavelet_skips
                               ? std::make_unique<WTBT<T>>(ps, "unet.skip_wtb" + std::to_string(i),
                                                           cfg.channels_at(i), rng)
                               : nullptr);
    }

    for (int i = L - 1; i >= 0; --i) {  // deep to shallow
        int c = cfg.channels_at(i);
        std::string pre = "unet.dec" + std::to_string(i);
        dec_res.emplace_back(ps, pre + ".res", 2 * c, c, cfg.temb_dim, rng);
        dec_tm.push_back(cfg.attn_at(i) ? std::make_unique<TransformerMambaT<T>>(ps, pre + ".tm", c, cfg, rng)
                                        : nullptr);
        if (i > 0)
            up.emplace_back(ps, "unet.up" + std::to_string(i), c, cfg.channels_at(i - 1), 3, Init::HeNormal,
                            rng, 1, 1);
    }

    head_norm = GroupNormT<T>(ps, "unet.head.norm", cfg.base, norm_groups_for(cfg.base));
    head_conv = Conv2dT<T>(ps, "unet.head.conv", cfg.base, cfg.in_channels, 3, Init::Zero, rng, 1, 1);
}

template <typename T>
ad::VarT<T> UNetT<T>::null_latent(int batch) const {
    return ad::repeat_outer(ad::reshape(ad::leaf(*null_cond), {1, cfg.cond_dim}), batch);
}

template <typename T>
ad::VarT<T> UNetT<T>::operator()(const ad::VarT<T>& x, const std::vector<int>& t,
                                 const ad::VarT<T>& cond) const {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
        throw ShapeMismatch("unet input shape");
    if (static_cast<int>(t.size()) != s[0]) throw ShapeMismatch("one time step per batch item");
    int B = s[0], L = cfg.levels();

    auto tv = temb(t, cfg.max_steps);
    auto cv = cond ? cond : null_latent(B);

    auto h = stem(x);
    std::vector<ad::VarT<T>> skips;
    for (int i = 0; i < L; ++i) {
        h = enc_res[i](h, tv);
        if (enc_tm[i]) h = (*enc_tm[i])(h, cv);
        skips.push_back(h);
        if (i + 1 < L) h = down[i](h);
    }

    h = mid_res1(h, tv);
    if (mid_tm) h = (*mid_tm)(h, cv);
    h = mid_res2(h, tv);

    for (int i = L - 1; i >= 0; --i) {
        int j = L - 1 - i;
        auto skip = skip_wtb[i] ? (*skip_wtb[i])(skips[i]) : skips[i];
        h = ad::concat<T>({h, skip}, 1);
        h = dec_res[j](h, tv);
        if (dec_tm[j]) h = (*dec_tm[j])(h, cv);
        if (i > 0) h = up[j](ad::upsample_nearest2x(h));
    }

    auto out = head_conv(ad::silu(head_norm(h)));
    const T* pv = out->value.data();
    for (size_t i = 0; i < out->value.size(); ++i)
        if (!std::isfinite(pv[i])) throw NonFiniteOutput("denoiser output");
    return out;
}

template <typename T>
ad::VarT<T> UNetT<T>::wavelet_regularizer(bool literal) const {
    ad::VarT<T> total;
    for (const auto& wtb : skip_wtb) {
        if (!wtb) continue;
        auto term = wavelet_loss(wtb->lwn.filters, literal);
        total = total ? ad::add(total, term) : term;
    }
    if (!total) total = ad::constant(TensorT<T>({1}));
    return total;
}

#define PROLL_INSTANTIATE_UNET(T)       \
    template struct TimeEmbeddingT<T>;  \
    template struct ResBlockT<T>;       \
    template struct TransformerBlockT<T>; \
    template struct TransformerMambaT<T>; \
    template struct UNetT<T>;

PROLL_INSTANTIATE_UNET(float)
PROLL_INSTANTIATE_UNET(double)

}  // namespace proll
