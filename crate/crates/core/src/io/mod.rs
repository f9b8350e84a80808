//! On-disk formats. All integers are little-endian except PGM samples.

mod bundle;
mod documents;
mod pgm;
mod tensor_file;

pub use bundle::{
    decode_bundle, encode_bundle, load_bundle, read_manifest, save_bundle, AnyModel, BundleManifest,
    ManifestEntry, BUNDLE_MAGIC, BUNDLE_VERSION, MAX_MANIFEST_LEN,
};
pub use documents::{
    config_to_json, load_annotations, load_config, parse_annotations, parse_config, AnnotationDoc,
};
pub use pgm::{encode_pgm, export_pgm, PgmScale};
pub use tensor_file::{
    decode_tensor, encode_raw, encode_tensor, load_density, load_tensor, save_density, save_tensor,
    RawTensor, TensorData, MAX_NDIM, TENSOR_MAGIC, TENSOR_VERSION,
};
