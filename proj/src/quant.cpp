#include "peft_forge/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "peft_forge/errors.hpp"

namespace peft::quant {
namespace {

constexpr Nf4Codebook kNf4Levels = {
    -1.0f,       -0.6961928f, -0.52507305f, -0.39491748f, -0.28444138f, -0.18477343f,
    -0.09105004f, 0.0f,       0.07958030f,  0.16093020f,  0.24611230f,  0.33791524f,
    0.44070983f,  0.56261700f, 0.72295684f, 1.0f,
};

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void require_finite(std::span<const float> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw QuantError(std::string(what) + ": non-finite value at index " +
                             std::to_string(i));
        }
    }
}

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
}

}  // namespace

const Nf4Codebook& nf4_codebook() noexcept { return kNf4Levels; }

float nf4_max_gap() noexcept {
    float gap = 0.0f;
    for (std::size_t i = 1; i < kNf4Levels.size(); ++i) {
        gap = std::max(gap, kNf4Levels[i] - kNf4Levels[i - 1]);
    }
    return gap;
}

std::uint8_t nearest_nf4_code(double normalized) noexcept {
    std::uint8_t best = 0;
    double best_dist = std::abs(normalized - static_cast<double>(kNf4Levels[0]));
    for (std::uint8_t i = 1; i < kNf4Levels.size(); ++i) {
        const double d = std::abs(normalized - static_cast<double>(kNf4Levels[i]));
        if (d < best_dist) {
            best_dist = d;
            best = i;
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Q8

std::vector<Q8Block> quantize_q8(std::span<const float> values, std::size_t block_size) {
    if (block_size == 0) {
        throw QuantError("quantize_q8: block_size must be >= 1");
    }
    require_finite(values, "quantize_q8");
    std::vector<Q8Block> blocks;
    blocks.reserve(ceil_div(values.size(), block_size));
    for (std::size_t start = 0; start < values.size(); start += block_size) {
        const auto block = values.subspan(start, std::min(block_size, values.size() - start));
        Q8Block out;
        for (float v : block) {
            out.absmax = std::max(out.absmax, std::abs(v));
        }
        out.codes.resize(block.size(), 0);
        if (out.absmax > 0.0f) {
            const double inv = 1.0 / static_cast<double>(out.absmax);
            for (std::size_t i = 0; i < block.size(); ++i) {
                const double scaled = kQ8MaxCode * (static_cast<double>(block[i]) * inv);
                const double rounded = std::clamp(std::round(scaled), -127.0, 127.0);
                out.codes[i] = static_cast<std::int8_t>(rounded);
            }
        }
        blocks.push_back(std::move(out));
    }
    return blocks;
}

std::vector<float> dequantize_q8(std::span<const Q8Block> blocks, std::size_t num_elements) {
    std::vector<float> out;
    out.reserve(num_elements);
    for (const auto& block : blocks) {
        if (!std::isfinite(block.absmax) || block.absmax < 0.0f) {
            throw IntegrityError("dequantize_q8: invalid block absmax");
        }
        const double step = static_cast<double>(block.absmax) / kQ8MaxCode;
        for (auto c : block.codes) {
            if (c < -kQ8MaxCode) {
                throw IntegrityError("dequantize_q8: code -128 is outside the symmetric range");
            }
            out.push_back(static_cast<float>(c * step));
        }
    }
    if (out.size() != num_elements) {
        throw IntegrityError("dequantize_q8: blocks hold " + std::to_string(out.size()) +
                             " codes, shape expects " + std::to_string(num_elements));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Double-quantized scales

std::size_t DoubleQuantizedScales::count() const noexcept {
    std::size_t n = 0;
    for (const auto& b : deviations) {
        n += b.codes.size();
    }
    return n;
}

DoubleQuantizedScales double_quantize_scales(std::span<const float> scales,
                                             std::size_t group_size) {
    if (group_size == 0) {
        throw QuantError("double_quantize_scales: group_size must be >= 1");
    }
    require_finite(scales, "double_quantize_scales");
    DoubleQuantizedScales dq;
    dq.group_size = static_cast<std::uint32_t>(group_size);
    std::vector<float> deviation;
    for (std::size_t start = 0; start < scales.size(); start += group_size) {
        const auto group = scales.subspan(start, std::min(group_size, scales.size() - start));
        double sum = 0.0;
        for (float s : group) {
            sum += s;
        }
        const float mean = static_cast<float>(sum / static_cast<double>(group.size()));
        deviation.assign(group.size(), 0.0f);
        for (std::size_t i = 0; i < group.size(); ++i) {
            deviation[i] = static_cast<float>(static_cast<double>(group[i]) - mean);
        }
        auto blocks = quantize_q8(deviation, group.size());
        dq.group_means.push_back(mean);
        dq.deviations.push_back(std::move(blocks.front()));
    }
    return dq;
}

std::vector<float> restore_scales(const DoubleQuantizedScales& dq) {
    if (dq.group_means.size() != dq.deviations.size()) {
        throw IntegrityError("restore_scales: group mean/deviation count mismatch");
    }
    std::vector<float> out;
    out.reserve(dq.count());
    for (std::size_t g = 0; g < dq.group_means.size(); ++g) {
        const auto dev = dequantize_q8(std::span(&dq.deviations[g], 1),
                                       dq.deviations[g].codes.size());
        for (float d : dev) {
            const double s = static_cast<double>(dq.group_means[g]) + d;
            out.push_back(static_cast<float>(std::max(0.0, s)));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// NF4 tensor

std::size_t QuantizedTensor::num_blocks() const noexcept {
    return block_size_ == 0 ? 0 : ceil_div(num_elements_, block_size_);
}

std::vector<float> QuantizedTensor::effective_scales() const {
    if (encoding_ == ScaleEncoding::PlainFp32) {
        return plain_scales_;
    }
    return restore_scales(dq_scales_);
}

QuantizedTensor QuantizedTensor::with_double_quantized_scales(std::size_t group_size) const {
    QuantizedTensor out = *this;
    if (encoding_ == ScaleEncoding::DoubleQuantized) {
        return out;
    }
    out.dq_scales_ = double_quantize_scales(plain_scales_, group_size);
    out.plain_scales_.clear();
    out.encoding_ = ScaleEncoding::DoubleQuantized;
    return out;
}

std::size_t QuantizedTensor::storage_bytes() const noexcept {
    std::size_t bytes = packed_codes_.size();
    if (encoding_ == ScaleEncoding::PlainFp32) {
        bytes += plain_scales_.size() * sizeof(float);
    } else {
        // mean + absmax per group, one byte per scale
        bytes += dq_scales_.group_means.size() * 2 * sizeof(float) + dq_scales_.count();
    }
    return bytes;
}

QuantizedTensor QuantizedTensor::from_codes(std::vector<std::size_t> shape,
                                            std::size_t block_size,
                                            std::span<const std::uint8_t> codes,
                                            std::vector<float> scales) {
    if (block_size == 0) {
        throw IntegrityError("block_size must be >= 1");
    }
    QuantizedTensor q;
    q.num_elements_ = shape_product(shape);
    if (codes.size() != q.num_elements_) {
        throw IntegrityError("code count " + std::to_string(codes.size()) +
                             " does not match shape (" + std::to_string(q.num_elements_) + ")");
    }
    q.shape_ = std::move(shape);
    q.block_size_ = block_size;
    if (scales.size() != q.num_blocks()) {
        throw IntegrityError("scale count " + std::to_string(scales.size()) + " != block count " +
                             std::to_string(q.num_blocks()));
    }
    for (float s : scales) {
        if (!std::isfinite(s) || s < 0.0f) {
            throw IntegrityError("block scale must be finite and non-negative");
        }
    }
    q.packed_codes_.assign(ceil_div(q.num_elements_, 2), 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > 15) {
            throw IntegrityError("code " + std::to_string(codes[i]) + " at index " +
                                 std::to_string(i) + " exceeds 15");
        }
        q.packed_codes_[i / 2] |= (i % 2 == 0) ? codes[i] : static_cast<std::uint8_t>(codes[i] << 4);
    }
    q.plain_scales_ = std::move(scales);
    return q;
}

QuantizedTensor quantize_nf4(std::span<const float> values, std::vector<std::size_t> shape,
                             std::size_t block_size) {
    if (block_size == 0) {
        throw QuantError("quantize_nf4: block_size must be >= 1");
    }
    if (values.empty()) {
        throw QuantError("quantize_nf4: tensor is empty");
    }
    if (shape_product(shape) != values.size()) {
        throw ShapeError("quantize_nf4: shape does not match value count");
    }
    require_finite(values, "quantize_nf4");

    QuantizedTensor q;
    q.shape_ = std::move(shape);
    q.num_elements_ = values.size();
    q.block_size_ = block_size;
    q.packed_codes_.assign(ceil_div(values.size(), 2), 0);
    q.plain_scales_.reserve(q.num_blocks());

    for (std::size_t start = 0; start < values.size(); start += block_size) {
        const std::size_t len = std::min(block_size, values.size() - start);
        float scale = 0.0f;
        for (std::size_t i = 0; i < len; ++i) {
            scale = std::max(scale, std::abs(values[start + i]));
        }
        q.plain_scales_.push_back(scale);
        for (std::size_t i = 0; i < len; ++i) {
            const std::size_t idx = start + i;
            const std::uint8_t c =
                scale > 0.0f
                    ? nearest_nf4_code(static_cast<double>(values[idx]) / static_cast<double>(scale))
                    : kNf4ZeroCode;
            q.packed_codes_[idx / 2] |= (idx % 2 == 0) ? c : static_cast<std::uint8_t>(c << 4);
        }
    }
    return q;
}

std::vector<float> dequantize_nf4(const QuantizedTensor& q) {
    const auto scales = q.effective_scales();
    if (scales.size() != q.num_blocks()) {
        throw IntegrityError("dequantize_nf4: scale count does not match block count");
    }
    if (q.packed_codes().size() * 2 < q.num_elements()) {
        throw IntegrityError("dequantize_nf4: code buffer too short");
    }
    const auto& levels = nf4_codebook();
    std::vector<float> out(q.num_elements());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = levels[q.code(i)] * scales[i / q.block_size()];
    }
    return out;
}

QuantErrorStats quant_error_stats(std::span<const float> original, const QuantizedTensor& q) {
    if (original.size() != q.num_elements()) {
        throw ShapeError("quant_error_stats: original has " + std::to_string(original.size()) +
                         " elements, quantized tensor has " + std::to_string(q.num_elements()));
    }
    const auto restored = dequantize_nf4(q);
    QuantErrorStats stats;
    double abs_sum = 0.0;
    double sq_sum = 0.0;
    for (std::size_t i = 0; i < restored.size(); ++i) {
        const double err = static_cast<double>(original[i]) - static_cast<double>(restored[i]);
        stats.max_abs_err = std::max(stats.max_abs_err, std::abs(err));
        abs_sum += std::abs(err);
        sq_sum += err * err;
    }
    const auto n = static_cast<double>(restored.size());
    stats.mean_abs_err = abs_sum / n;
    stats.mse = sq_sum / n;
    return stats;
}

// ---------------------------------------------------------------------------
// Serialization: {ndim u32, dims u64[], block_size u32, scale_encoding u8},
// packed codes, then the scale section.

void QuantizedTensor::serialize(ByteWriter& out) const {
    out.put(static_cast<std::uint32_t>(shape_.size()));
    for (auto d : shape_) {
        out.put(static_cast<std::uint64_t>(d));
    }
    out.put(static_cast<std::uint32_t>(block_size_));
    out.put(static_cast<std::uint8_t>(encoding_));
    out.put_bytes(packed_codes_);
    if (encoding_ == ScaleEncoding::PlainFp32) {
        out.put_span(std::span<const float>(plain_scales_));
        return;
    }
    out.put(dq_scales_.group_size);
    out.put(static_cast<std::uint32_t>(dq_scales_.group_means.size()));
    for (std::size_t g = 0; g < dq_scales_.group_means.size(); ++g) {
        out.put(dq_scales_.group_means[g]);
        out.put(dq_scales_.deviations[g].absmax);
        out.put_span(std::span<const std::int8_t>(dq_scales_.deviations[g].codes));
    }
}

QuantizedTensor QuantizedTensor::deserialize(ByteReader& in) {
    QuantizedTensor q;
    const auto ndim = in.get<std::uint32_t>();
    if (ndim == 0 || ndim > 8) {
        throw IntegrityError("quantized tensor: unsupported rank " + std::to_string(ndim));
    }
    for (std::uint32_t i = 0; i < ndim; ++i) {
        q.shape_.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
    }
    q.num_elements_ = shape_product(q.shape_);
    q.block_size_ = in.get<std::uint32_t>();
    if (q.block_size_ == 0) {
        throw IntegrityError("quantized tensor: zero block size");
    }
    const auto enc = in.get<std::uint8_t>();
    if (enc > 1) {
        throw IntegrityError("quantized tensor: unknown scale encoding " + std::to_string(enc));
    }
    q.encoding_ = static_cast<ScaleEncoding>(enc);
    const auto codes = in.get_bytes(ceil_div(q.num_elements_, 2));
    q.packed_codes_.assign(codes.begin(), codes.end());
    const std::size_t blocks = q.num_blocks();
    if (q.encoding_ == ScaleEncoding::PlainFp32) {
        q.plain_scales_.resize(blocks);
        in.get_into(std::span<float>(q.plain_scales_));
        return q;
    }
    q.dq_scales_.group_size = in.get<std::uint32_t>();
    const auto groups = in.get<std::uint32_t>();
    if (q.dq_scales_.group_size == 0 || groups != ceil_div(blocks, q.dq_scales_.group_size)) {
        throw IntegrityError("quantized tensor: scale group layout does not match block count");
    }
    for (std::uint32_t g = 0; g < groups; ++g) {
        const std::size_t len =
            std::min<std::size_t>(q.dq_scales_.group_size, blocks - g * q.dq_scales_.group_size);
        q.dq_scales_.group_means.push_back(in.get<float>());
        Q8Block b;
        b.absmax = in.get<float>();
        b.codes.resize(len);
        in.get_into(std::span<std::int8_t>(b.codes));
        q.dq_scales_.deviations.push_back(std::move(b));
    }
    return q;
}

}  // namespace peft::quant
