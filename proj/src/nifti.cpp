#include "rflow/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace rflow {

namespace {

static_assert(std::endian::native == std::endian::little);

constexpr int32_t kHeaderSize = 348;
constexpr int16_t kDtU8 = 2, kDtI16 = 4, kDtI32 = 8, kDtF32 = 16, kDtF64 = 64;

#pragma pack(push, 1)
struct NiftiHeader {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max;
    float cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == kHeaderSize);

template <typename T>
void decode_payload(std::ifstream& is, size_t n, std::vector<double>& out,
                    const std::string& path) {
    std::vector<T> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()),
            static_cast<std::streamsize>(n * sizeof(T)));
    check(static_cast<bool>(is), Err::BadMagic, "truncated NIfTI payload: " + path);
    out.resize(n);
    for (size_t i = 0; i < n; ++i) out[i] = static_cast<double>(raw[i]);
}

}  // namespace

Volume read_nifti(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check(is.good(), Err::DataMissing, "cannot open: " + path);
    NiftiHeader h{};
    is.read(reinterpret_cast<char*>(&h), sizeof(h));
    check(static_cast<bool>(is), Err::BadMagic, "file shorter than a NIfTI-1 header: " + path);

    if (h.sizeof_hdr != kHeaderSize) {
        int32_t swapped;
        auto* src = reinterpret_cast<const unsigned char*>(&h.sizeof_hdr);
        unsigned char rev[4] = {src[3], src[2], src[1], src[0]};
        std::memcpy(&swapped, rev, 4);
        check(swapped != kHeaderSize, Err::UnsupportedDatatype,
              "big-endian NIfTI not supported: " + path);
        fail(Err::BadMagic, "sizeof_hdr != 348: " + path);
    }
    check(std::memcmp(h.magic, "n+1\0", 4) == 0, Err::BadMagic,
          "magic is not \"n+1\": " + path);
    check(h.dim[0] == 3, Err::UnsupportedDims,
          "only 3-D volumes supported, dim[0]=" + std::to_string(h.dim[0]) + ": " + path);
    check(h.dim[1] > 0 && h.dim[2] > 0 && h.dim[3] > 0, Err::UnsupportedDims,
          "nonpositive extent: " + path);

    Volume v;
    v.extents = {static_cast<size_t>(h.dim[3]), static_cast<size_t>(h.dim[2]),
                 static_cast<size_t>(h.dim[1])};
    for (int a = 0; a < 3; ++a) {
        float p = h.pixdim[3 - a];
        check(p > 0.0f && std::isfinite(p), Err::InvalidSpacing,
              "nonpositive pixdim: " + path);
        v.spacing[a] = static_cast<double>(p);
    }

    long offset = std::lround(h.vox_offset);
    check(offset >= 352, Err::BadMagic, "vox_offset < 352: " + path);
    is.seekg(offset, std::ios::beg);
    check(static_cast<bool>(is), Err::BadMagic, "cannot seek to payload: " + path);

    size_t n = v.numel();
    switch (h.datatype) {
        case kDtU8: decode_payload<uint8_t>(is, n, v.data, path); break;
        case kDtI16: decode_payload<int16_t>(is, n, v.data, path); break;
        case kDtI32: decode_payload<int32_t>(is, n, v.data, path); break;
        case kDtF32: decode_payload<float>(is, n, v.data, path); break;
        case kDtF64: decode_payload<double>(is, n, v.data, path); break;
        default:
            fail(Err::UnsupportedDatatype,
                 "datatype code " + std::to_string(h.datatype) + ": " + path);
    }

    if (h.scl_slope != 0.0f) {
        double slope = static_cast<double>(h.scl_slope);
        double inter = static_cast<double>(h.scl_inter);
        for (auto& x : v.data) x = slope * x + inter;
    }
    if (h.cal_max > h.cal_min) {
        v.intensity_range = {static_cast<double>(h.cal_min), static_cast<double>(h.cal_max)};
    } else if (!v.data.empty()) {
        auto [lo, hi] = std::minmax_element(v.data.begin(), v.data.end());
        v.intensity_range = {*lo, *hi};
    }
    return v;
}

void write_nifti(const Volume& v, const std::string& path, NiftiDtype dtype) {
    NiftiHeader h{};
    h.sizeof_hdr = kHeaderSize;
    h.regular = 'r';
    h.dim[0] = 3;
    h.dim[1] = static_cast<int16_t>(v.extents[2]);
    h.dim[2] = static_cast<int16_t>(v.extents[1]);
    h.dim[3] = static_cast<int16_t>(v.extents[0]);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = dtype == NiftiDtype::F64 ? kDtF64 : kDtF32;
    h.bitpix = dtype == NiftiDtype::F64 ? 64 : 32;
    h.pixdim[0] = 1.0f;
    h.pixdim[1] = static_cast<float>(v.spacing[2]);
    h.pixdim[2] = static_cast<float>(v.spacing[1]);
    h.pixdim[3] = static_cast<float>(v.spacing[0]);
    h.vox_offset = 352.0f;
    h.scl_slope = 1.0f;
    h.scl_inter = 0.0f;
    h.cal_min = static_cast<float>(v.intensity_range[0]);
    h.cal_max = static_cast<float>(v.intensity_range[1]);
    std::memcpy(h.magic, "n+1\0", 4);

    std::ofstream os(path, std::ios::binary);
    check(os.good(), Err::DataMissing, "cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    const char ext[4] = {0, 0, 0, 0};
    os.write(ext, 4);
    if (dtype == NiftiDtype::F64) {
        os.write(reinterpret_cast<const char*>(v.data.data()),
                 static_cast<std::streamsize>(v.data.size() * sizeof(double)));
    } else {
        std::vector<float> raw(v.data.begin(), v.data.end());
        os.write(reinterpret_cast<const char*>(raw.data()),
                 static_cast<std::streamsize>(raw.size() * sizeof(float)));
    }
    check(os.good(), Err::Internal, "write failed: " + path);
}

}  // namespace rflow
