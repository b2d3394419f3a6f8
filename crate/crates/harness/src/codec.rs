//! JPEG 2000 round trips through the bundled OpenJPEG library.

use std::ffi::CString;
use std::path::Path;
use std::ptr;

use openjpeg_sys as opj;
use prx_core::datakit::Jpeg2000Codec;
use prx_core::image::RgbImage;

use crate::pipeline::temp_path;

/// Irreversible 9/7 wavelet codec with a single quality layer at the
/// requested compression ratio.
#[derive(Clone, Copy, Debug, Default)]
pub struct OpenJpegCodec;

struct Codec(*mut opj::opj_codec_t);
struct Stream(*mut opj::opj_stream_t);
struct Image(*mut opj::opj_image_t);

impl Drop for Codec {
    fn drop(&mut self) {
        if !self.0.is_null() {
            unsafe { opj::opj_destroy_codec(self.0) }
        }
    }
}

impl Drop for Stream {
    fn drop(&mut self) {
        if !self.0.is_null() {
            unsafe { opj::opj_stream_destroy(self.0) }
        }
    }
}

impl Drop for Image {
    fn drop(&mut self) {
        if !self.0.is_null() {
            unsafe { opj::opj_image_destroy(self.0) }
        }
    }
}

fn fail(what: &str) -> prx_core::Error {
    prx_core::Error::Backend(format!("jpeg2000 {what} failed"))
}

fn c_path(path: &Path) -> prx_core::Result<CString> {
    CString::new(path.as_os_str().as_encoded_bytes()).map_err(|_| fail("path conversion"))
}

fn stream(path: &Path, read: bool) -> prx_core::Result<Stream> {
    let name = c_path(path)?;
    let s = unsafe { opj::opj_stream_create_default_file_stream(name.as_ptr(), read as opj::OPJ_BOOL) };
    if s.is_null() {
        return Err(fail("stream creation"));
    }
    Ok(Stream(s))
}

fn encode(image: &RgbImage, ratio: f64, path: &Path) -> prx_core::Result<()> {
    let (h, w) = (image.height(), image.width());
    let mut parms = [opj::opj_image_cmptparm_t { dx: 1, dy: 1, w: w as u32, h: h as u32, x0: 0, y0: 0, prec: 8, bpp: 8, sgnd: 0 }; 3];
    let img = Image(unsafe { opj::opj_image_create(3, parms.as_mut_ptr(), opj::OPJ_COLOR_SPACE::OPJ_CLRSPC_SRGB) });
    if img.0.is_null() {
        return Err(fail("image allocation"));
    }
    let rgb = image.to_rgb8();
    unsafe {
        (*img.0).x1 = w as u32;
        (*img.0).y1 = h as u32;
        for c in 0..3 {
            let data = std::slice::from_raw_parts_mut((*(*img.0).comps.add(c)).data, h * w);
            for (p, v) in data.iter_mut().enumerate() {
                *v = rgb[3 * p + c] as i32;
            }
        }
    }
    let mut params = unsafe {
        let mut p = std::mem::MaybeUninit::<opj::opj_cparameters_t>::zeroed();
        opj::opj_set_default_encoder_parameters(p.as_mut_ptr());
        p.assume_init()
    };
    params.tcp_numlayers = 1;
    params.tcp_rates[0] = ratio as f32;
    params.cp_disto_alloc = 1;
    params.irreversible = 1;
    params.tcp_mct = 1;
    let levels = (h.min(w) as f64).log2().floor() as i32 + 1;
    params.numresolution = params.numresolution.min(levels).min(6);

    let codec = Codec(unsafe { opj::opj_create_compress(opj::OPJ_CODEC_FORMAT::OPJ_CODEC_J2K) });
    if codec.0.is_null() {
        return Err(fail("encoder creation"));
    }
    let out = stream(path, false)?;
    unsafe {
        if opj::opj_setup_encoder(codec.0, &mut params, img.0) == 0 {
            return Err(fail("encoder setup"));
        }
        if opj::opj_start_compress(codec.0, img.0, out.0) == 0
            || opj::opj_encode(codec.0, out.0) == 0
            || opj::opj_end_compress(codec.0, out.0) == 0
        {
            return Err(fail("encoding"));
        }
    }
    Ok(())
}

fn decode(path: &Path, h: usize, w: usize) -> prx_core::Result<RgbImage> {
    let codec = Codec(unsafe { opj::opj_create_decompress(opj::OPJ_CODEC_FORMAT::OPJ_CODEC_J2K) });
    if codec.0.is_null() {
        return Err(fail("decoder creation"));
    }
    let input = stream(path, true)?;
    let mut img = Image(ptr::null_mut());
    unsafe {
        let mut params = std::mem::MaybeUninit::<opj::opj_dparameters_t>::zeroed();
        opj::opj_set_default_decoder_parameters(params.as_mut_ptr());
        let mut params = params.assume_init();
        if opj::opj_setup_decoder(codec.0, &mut params) == 0 {
            return Err(fail("decoder setup"));
        }
        if opj::opj_read_header(input.0, codec.0, &mut img.0) == 0 {
            return Err(fail("header read"));
        }
        if opj::opj_decode(codec.0, input.0, img.0) == 0 || opj::opj_end_decompress(codec.0, input.0) == 0 {
            return Err(fail("decoding"));
        }
        if (*img.0).numcomps != 3 {
            return Err(fail("component check"));
        }
        let mut rgb = vec![0u8; 3 * h * w];
        for c in 0..3 {
            let comp = &*(*img.0).comps.add(c);
            if (comp.w as usize, comp.h as usize) != (w, h) || comp.data.is_null() {
                return Err(fail("size check"));
            }
            let data = std::slice::from_raw_parts(comp.data, h * w);
            for (p, &v) in data.iter().enumerate() {
                rgb[3 * p + c] = v.clamp(0, 255) as u8;
            }
        }
        RgbImage::from_rgb8(h, w, &rgb)
    }
}

impl Jpeg2000Codec for OpenJpegCodec {
    fn round_trip(&self, image: &RgbImage, ratio: f64) -> prx_core::Result<RgbImage> {
        let path = temp_path("j2k");
        let result = encode(image, ratio, &path).and_then(|_| decode(&path, image.height(), image.width()));
        let _ = std::fs::remove_file(&path);
        result
    }
}

/// The codec if a probe round trip succeeds in this environment.
pub fn available_codec() -> Option<OpenJpegCodec> {
    let probe = RgbImage::filled(16, 16, [0.5, 0.25, 0.75]).ok()?;
    OpenJpegCodec.round_trip(&probe, 10.0).ok().map(|_| OpenJpegCodec)
}
