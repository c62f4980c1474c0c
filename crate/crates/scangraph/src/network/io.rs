//! Network parameter files.
//!
//! Layout: the 7-byte magic `DSCNET1`, a hyperparameter block of little-endian
//! u32 values (knn k, cluster count, descriptor dim, then per branch the layer
//! count followed by each layer's sublayer widths), then every parameter
//! tensor in declaration order as little-endian f64 (weights row-major, bias
//! after each weight). Save and load round-trip bit-exactly.

use std::path::Path;

use super::{DescriptorNet, NetworkConfig, NetworkError};

pub const NETWORK_MAGIC: &[u8; 7] = b"DSCNET1";

pub fn save_network(net: &DescriptorNet, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    let path = path.as_ref();
    std::fs::write(path, encode_network(net)).map_err(|source| NetworkError::Io {
        action: "write",
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_network(path: impl AsRef<Path>) -> Result<DescriptorNet, NetworkError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| NetworkError::Io {
        action: "read",
        path: path.to_path_buf(),
        source,
    })?;
    decode_network(&bytes, path)
}

pub fn encode_network(net: &DescriptorNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NETWORK_MAGIC);
    let cfg = &net.config;
    let push_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    push_u32(&mut out, cfg.knn_k);
    push_u32(&mut out, cfg.clusters);
    push_u32(&mut out, cfg.descriptor_dim);
    for branch in [&cfg.eu_layers, &cfg.eig_layers] {
        push_u32(&mut out, branch.len());
        for layer in branch {
            push_u32(&mut out, layer.len());
            for &w in layer {
                push_u32(&mut out, w);
            }
        }
    }
    for v in net.to_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_network(bytes: &[u8], path: &Path) -> Result<DescriptorNet, NetworkError> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(NETWORK_MAGIC.len())?;
    if magic != NETWORK_MAGIC {
        return Err(NetworkError::BadMagic { path: path.to_path_buf() });
    }
    let knn_k = r.read_u32()? as usize;
    let clusters = r.read_u32()? as usize;
    let descriptor_dim = r.read_u32()? as usize;
    let mut branches = Vec::with_capacity(2);
    for _ in 0..2 {
        let layer_count = r.read_u32()? as usize;
        if layer_count > 64 {
            return Err(NetworkError::Truncated { path: path.to_path_buf() });
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let sublayers = r.read_u32()? as usize;
            if sublayers > 64 {
                return Err(NetworkError::Truncated { path: path.to_path_buf() });
            }
            let mut widths = Vec::with_capacity(sublayers);
            for _ in 0..sublayers {
                widths.push(r.read_u32()? as usize);
            }
            layers.push(widths);
        }
        branches.push(layers);
    }
    let eig_layers = branches.pop().unwrap();
    let eu_layers = branches.pop().unwrap();
    let config = NetworkConfig { knn_k, eu_layers, eig_layers, clusters, descriptor_dim };
    config.validate()?;

    let count = config.param_count();
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let v = r.read_f64()?;
        if !v.is_finite() {
            return Err(NetworkError::NonFiniteParam { path: path.to_path_buf() });
        }
        params.push(v);
    }
    if r.pos != bytes.len() {
        return Err(NetworkError::Truncated { path: path.to_path_buf() });
    }
    DescriptorNet::from_vec(config, &params)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetworkError::Truncated { path: self.path.to_path_buf() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn read_u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn read_f64(&mut self) -> Result<f64, NetworkError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            knn_k: 2,
            eu_layers: vec![vec![4, 4], vec![8]],
            eig_layers: vec![vec![4], vec![8]],
            clusters: 3,
            descriptor_dim: 16,
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let net = DescriptorNet::init(small_config(), 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net.config, loaded.config);
        assert_eq!(net.to_vec(), loaded.to_vec());
        // bytes written twice are identical too
        let again = dir.path().join("net2.bin");
        save_network(&loaded, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let net = DescriptorNet::init(small_config(), 1).unwrap();
        let mut bytes = encode_network(&net);
        bytes[0] = b'X';
        assert!(matches!(
            decode_network(&bytes, Path::new("x")),
            Err(NetworkError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let net = DescriptorNet::init(small_config(), 1).unwrap();
        let bytes = encode_network(&net);
        for cut in [5, 20, bytes.len() - 3] {
            assert!(matches!(
                decode_network(&bytes[..cut], Path::new("x")),
                Err(NetworkError::BadMagic { .. }) | Err(NetworkError::Truncated { .. })
            ));
        }
        // trailing garbage is also a corruption signal
        let mut long = bytes.clone();
        long.extend_from_slice(&[0u8; 4]);
        assert!(matches!(
            decode_network(&long, Path::new("x")),
            Err(NetworkError::Truncated { .. })
        ));
    }

    #[test]
    fn non_finite_parameter_rejected() {
        let net = DescriptorNet::init(small_config(), 1).unwrap();
        let mut bytes = encode_network(&net);
        let header = bytes.len() - net.param_count() * 8;
        bytes[header..header + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(
            decode_network(&bytes, Path::new("x")),
            Err(NetworkError::NonFiniteParam { .. })
        ));
    }
}
