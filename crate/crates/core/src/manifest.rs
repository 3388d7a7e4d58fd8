//! Content checksums for run manifests.

use sha2::{Digest, Sha256};

use crate::volume::{MaskVolume, Volume};
use crate::wavelet::SubbandStack;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Hash of dims and little-endian sample bits.
pub fn volume_checksum(v: &Volume) -> String {
    let mut bytes: Vec<u8> = v
        .dims()
        .iter()
        .flat_map(|d| (*d as u64).to_le_bytes())
        .collect();
    bytes.extend(f64_bytes(v.data()));
    sha256_hex(&bytes)
}

pub fn mask_checksum(m: &MaskVolume) -> String {
    let mut bytes: Vec<u8> = m
        .dims()
        .iter()
        .flat_map(|d| (*d as u64).to_le_bytes())
        .collect();
    bytes.extend_from_slice(m.data());
    sha256_hex(&bytes)
}

pub fn stack_checksum(s: &SubbandStack) -> String {
    let mut bytes: Vec<u8> = (s.channels() as u64).to_le_bytes().to_vec();
    bytes.extend(s.dims().iter().flat_map(|d| (*d as u64).to_le_bytes()));
    bytes.extend(f64_bytes(s.data()));
    sha256_hex(&bytes)
}
