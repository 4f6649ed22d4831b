use super::{ArchTemplate, EdgeRole, LayerInput, LayerKind, LayerSpec, MemberEdge, PruneGroup, StructError};

pub const DEFAULT_TOY_WIDTH: usize = 16;
pub const DEFAULT_TOY_CLASSES: usize = 4;
const TOY_SIDE: usize = 8;

const VGG16: &[usize] = &[
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
];
const VGG19: &[usize] = &[
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];

/// (in, 1x1, 3x3 reduce, 3x3, double-3x3 reduce, double-3x3, pool proj) per inception module.
const INCEPTIONS: &[(&str, [usize; 7])] = &[
    ("a3", [192, 64, 96, 128, 16, 32, 32]),
    ("b3", [256, 128, 128, 192, 32, 96, 64]),
    ("a4", [480, 192, 96, 208, 16, 48, 64]),
    ("b4", [512, 160, 112, 224, 24, 64, 64]),
    ("c4", [512, 128, 128, 256, 24, 64, 64]),
    ("d4", [512, 112, 144, 288, 32, 64, 64]),
    ("e4", [528, 256, 160, 320, 32, 128, 128]),
    ("a5", [832, 256, 160, 320, 32, 128, 128]),
    ("b5", [832, 384, 192, 384, 48, 128, 128]),
];

/// Builds one of the known templates.
///
/// Supported ids: `vgg16`, `vgg19`, `resnet56`, `resnet110`, `googlenet`, each with a
/// `-cifar` (10 classes) or `-cifar100` suffix, and `toynet-<depth>[w<width>][c<classes>]`.
pub fn build_template(arch_id: &str) -> Result<ArchTemplate, StructError> {
    let unknown = || StructError::UnknownArchitecture(arch_id.to_string());
    if let Some(rest) = arch_id.strip_prefix("toynet-") {
        let (depth, width, classes) = parse_toy(rest).ok_or_else(unknown)?;
        let t = toynet_template(depth, width, classes);
        // only the canonical spelling is accepted so that ids compare by string
        return if t.arch_id == arch_id { Ok(t) } else { Err(unknown()) };
    }
    let (net, classes) = if let Some(net) = arch_id.strip_suffix("-cifar100") {
        (net, 100)
    } else if let Some(net) = arch_id.strip_suffix("-cifar") {
        (net, 10)
    } else {
        return Err(unknown());
    };
    match net {
        "vgg16" => Ok(vgg(arch_id, VGG16, classes)),
        "vgg19" => Ok(vgg(arch_id, VGG19, classes)),
        "resnet56" => Ok(resnet(arch_id, 9, classes)),
        "resnet110" => Ok(resnet(arch_id, 18, classes)),
        "googlenet" => Ok(googlenet(arch_id, classes)),
        _ => Err(unknown()),
    }
}

fn parse_toy(rest: &str) -> Option<(usize, usize, usize)> {
    let digits_end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let depth = rest[..digits_end].parse().ok()?;
    let mut width = DEFAULT_TOY_WIDTH;
    let mut classes = DEFAULT_TOY_CLASSES;
    let mut tail = &rest[digits_end..];
    for (tag, slot) in [('w', &mut width), ('c', &mut classes)] {
        if let Some(after) = tail.strip_prefix(tag) {
            let end = after.find(|c: char| !c.is_ascii_digit()).unwrap_or(after.len());
            *slot = after[..end].parse().ok()?;
            tail = &after[end..];
        }
    }
    (tail.is_empty() && width >= 1 && classes >= 2).then_some((depth, width, classes))
}

/// `depth` same-padded 3x3 convolutions of `width` channels on a 1x8x8 input,
/// flattened into a dense classifier.
pub fn toynet_template(depth: usize, width: usize, classes: usize) -> ArchTemplate {
    let mut id = format!("toynet-{depth}");
    if width != DEFAULT_TOY_WIDTH {
        id.push_str(&format!("w{width}"));
    }
    if classes != DEFAULT_TOY_CLASSES {
        id.push_str(&format!("c{classes}"));
    }
    let mut b = Builder::new(&id, (1, TOY_SIDE, TOY_SIDE));
    let mut x = b.image();
    for i in 1..=depth {
        let name = format!("conv{i}");
        let g = b.group(&name, width, false);
        x = b.conv(&name, x, g, 3, 1, 1, true);
    }
    let g = b.group("classes", classes, true);
    b.dense("fc", x, g);
    b.finish(classes)
}

fn vgg(arch_id: &str, cfg: &[usize], classes: usize) -> ArchTemplate {
    let mut b = Builder::new(arch_id, (3, 32, 32));
    let mut x = b.image();
    let (mut conv_i, mut pool_i) = (0, 0);
    for &width in cfg {
        if width == 0 {
            pool_i += 1;
            x = b.pool(&format!("pool{pool_i}"), x, 2, 2, 0);
            continue;
        }
        conv_i += 1;
        let name = format!("conv{conv_i}");
        let g = b.group(&name, width, false);
        x = b.conv(&name, x, g, 3, 1, 1, true);
        x = b.bn(&format!("bn{conv_i}"), x);
    }
    let g = b.group("classes", classes, true);
    b.dense("fc", x, g);
    b.finish(classes)
}

fn resnet(arch_id: &str, blocks: usize, classes: usize) -> ArchTemplate {
    let mut b = Builder::new(arch_id, (3, 32, 32));
    let trunks = [
        b.group("trunk1", 16, true),
        b.group("trunk2", 32, true),
        b.group("trunk3", 64, true),
    ];
    let x = b.image();
    let x = b.conv("conv1", x, trunks[0], 3, 1, 1, false);
    let mut x = b.bn("bn1", x);
    let mut in_width = 16;
    for (stage, &trunk) in trunks.iter().enumerate() {
        let width = 16 << stage;
        for blk in 0..blocks {
            let stride = if stage > 0 && blk == 0 { 2 } else { 1 };
            let p = format!("layer{}.{blk}", stage + 1);
            let g = b.group(&format!("{p}.conv1"), width, false);
            let h = b.conv(&format!("{p}.conv1"), x, g, 3, stride, 1, false);
            let h = b.bn(&format!("{p}.bn1"), h);
            let h = b.conv(&format!("{p}.conv2"), h, trunk, 3, 1, 1, false);
            let h = b.bn(&format!("{p}.bn2"), h);
            let shortcut = if stride != 1 || in_width != width {
                let s = b.conv(&format!("{p}.shortcut"), x, trunk, 1, stride, 0, false);
                b.bn(&format!("{p}.shortcut_bn"), s)
            } else {
                x
            };
            x = b.add(&format!("{p}.add"), h, shortcut);
            in_width = width;
        }
    }
    let side = x.spatial.0;
    let x = b.pool("avgpool", x, side, side, 0);
    let g = b.group("classes", classes, true);
    b.dense("fc", x, g);
    b.finish(classes)
}

fn googlenet(arch_id: &str, classes: usize) -> ArchTemplate {
    let mut b = Builder::new(arch_id, (3, 32, 32));
    let pre = b.group("pre", 192, true);
    let x = b.image();
    let x = b.conv("pre", x, pre, 3, 1, 1, true);
    let mut x = b.bn("pre_bn", x);
    for &(name, [_, n1, n3r, n3, n5r, n5, pp]) in INCEPTIONS {
        if name == "a4" || name == "a5" {
            x = b.pool(&format!("maxpool_{name}"), x, 3, 2, 1);
        }
        let cbr = |b: &mut Builder, tag: &str, from: Node, width: usize, frozen: bool, k: usize| {
            let lname = format!("{name}.{tag}");
            let g = b.group(&lname, width, frozen);
            let y = b.conv(&lname, from, g, k, 1, k / 2, true);
            b.bn(&format!("{lname}_bn"), y)
        };
        let b1 = cbr(&mut b, "b1", x, n1, true, 1);
        let b2 = cbr(&mut b, "b2.reduce", x, n3r, false, 1);
        let b2 = cbr(&mut b, "b2.conv", b2, n3, true, 3);
        let b3 = cbr(&mut b, "b3.reduce", x, n5r, false, 1);
        let b3 = cbr(&mut b, "b3.conv1", b3, n5, false, 3);
        let b3 = cbr(&mut b, "b3.conv2", b3, n5, true, 3);
        let p = b.pool(&format!("{name}.b4.pool"), x, 3, 1, 1);
        let b4 = cbr(&mut b, "b4.proj", p, pp, true, 1);
        let out = b.group(&format!("{name}.out"), n1 + n3 + n5 + pp, true);
        x = b.concat(&format!("{name}.concat"), &[b1, b2, b3, b4], out);
    }
    let side = x.spatial.0;
    let x = b.pool("avgpool", x, side, 1, 0);
    let g = b.group("classes", classes, true);
    b.dense("fc", x, g);
    b.finish(classes)
}

#[derive(Debug, Clone, Copy)]
struct Node {
    input: LayerInput,
    spatial: (usize, usize),
}

struct GroupDraft {
    name: String,
    count: usize,
    frozen: bool,
}

struct Builder {
    arch_id: String,
    input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    groups: Vec<GroupDraft>,
}

impl Builder {
    fn new(arch_id: &str, input_shape: (usize, usize, usize)) -> Self {
        Self {
            arch_id: arch_id.to_string(),
            input_shape,
            layers: Vec::new(),
            groups: Vec::new(),
        }
    }

    fn image(&self) -> Node {
        Node {
            input: LayerInput::Image,
            spatial: (self.input_shape.1, self.input_shape.2),
        }
    }

    fn group(&mut self, name: &str, count: usize, frozen: bool) -> usize {
        self.groups.push(GroupDraft {
            name: name.to_string(),
            count,
            frozen,
        });
        self.groups.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        name: &str,
        kind: LayerKind,
        inputs: &[Node],
        (kernel, stride, padding): (usize, usize, usize),
        bias: bool,
        out_group: Option<usize>,
    ) -> Node {
        let spec = LayerSpec {
            name: name.to_string(),
            kind,
            kernel,
            stride,
            padding,
            in_spatial: inputs[0].spatial,
            bias,
            inputs: inputs.iter().map(|n| n.input).collect(),
            out_group,
        };
        let spatial = spec.out_spatial();
        self.layers.push(spec);
        Node {
            input: LayerInput::Layer(self.layers.len() - 1),
            spatial,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, from: Node, g: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Node {
        self.push(name, LayerKind::Conv, &[from], (k, stride, pad), bias, Some(g))
    }

    fn bn(&mut self, name: &str, from: Node) -> Node {
        self.push(name, LayerKind::BatchNorm, &[from], (1, 1, 0), false, None)
    }

    fn pool(&mut self, name: &str, from: Node, k: usize, stride: usize, pad: usize) -> Node {
        self.push(name, LayerKind::Pool, &[from], (k, stride, pad), false, None)
    }

    fn add(&mut self, name: &str, a: Node, b: Node) -> Node {
        self.push(name, LayerKind::Add, &[a, b], (1, 1, 0), false, None)
    }

    fn concat(&mut self, name: &str, parts: &[Node], g: usize) -> Node {
        self.push(name, LayerKind::Concat, parts, (1, 1, 0), false, Some(g))
    }

    fn dense(&mut self, name: &str, from: Node, g: usize) -> Node {
        self.push(name, LayerKind::Dense, &[from], (1, 1, 0), true, Some(g))
    }

    /// Orders groups free-first and derives every group's member edges.
    fn finish(self, num_classes: usize) -> ArchTemplate {
        let Builder {
            arch_id,
            input_shape,
            mut layers,
            groups,
        } = self;

        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&g| groups[g].frozen);
        let mut remap = vec![0; groups.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        for l in &mut layers {
            l.out_group = l.out_group.map(|g| remap[g]);
        }

        // group whose width each layer emits, following pass-through layers
        let mut emits: Vec<Option<usize>> = Vec::with_capacity(layers.len());
        for l in &layers {
            let g = l.out_group.or_else(|| match l.inputs.first() {
                Some(LayerInput::Layer(j)) => emits[*j],
                _ => None,
            });
            emits.push(g);
        }

        let mut edges: Vec<Vec<MemberEdge>> = vec![Vec::new(); groups.len()];
        for (i, l) in layers.iter().enumerate() {
            if let Some(g) = l.out_group {
                edges[g].push(MemberEdge {
                    layer: i,
                    role: EdgeRole::Produces,
                });
            }
            for input in &l.inputs {
                if let LayerInput::Layer(j) = input {
                    if let Some(g) = emits[*j] {
                        let edge = MemberEdge {
                            layer: i,
                            role: EdgeRole::Consumes,
                        };
                        if !edges[g].contains(&edge) {
                            edges[g].push(edge);
                        }
                    }
                }
            }
        }

        let groups = order
            .iter()
            .enumerate()
            .map(|(id, &old)| PruneGroup {
                id,
                name: groups[old].name.clone(),
                original_count: groups[old].count,
                frozen: groups[old].frozen,
                member_edges: std::mem::take(&mut edges[id]),
            })
            .collect();

        ArchTemplate {
            arch_id,
            layers,
            groups,
            input_shape,
            num_classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structmodel::{apply_structure, count_flops, count_params};

    #[test]
    fn vgg16_free_groups_follow_config() {
        let t = build_template("vgg16-cifar").unwrap();
        assert_eq!(
            t.original_counts(),
            vec![64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512]
        );
        assert!(t.groups[13..].iter().all(|g| g.frozen));
    }

    #[test]
    fn resnet56_has_one_free_group_per_block() {
        let t = build_template("resnet56-cifar").unwrap();
        assert_eq!(t.num_free(), 27);
        let trunks: Vec<_> = t.groups.iter().filter(|g| g.name.starts_with("trunk")).collect();
        assert_eq!(trunks.len(), 3);
        assert!(trunks.iter().all(|g| g.frozen));
        assert_eq!(
            trunks.iter().map(|g| g.original_count).collect::<Vec<_>>(),
            vec![16, 32, 64]
        );
        assert_eq!(build_template("resnet110-cifar").unwrap().num_free(), 54);
    }

    #[test]
    fn googlenet_prunes_branch_interiors_only() {
        let t = build_template("googlenet-cifar").unwrap();
        assert_eq!(t.num_free(), 27);
        for g in t.free_groups() {
            assert!(
                g.name.ends_with("b2.reduce") || g.name.ends_with("b3.reduce") || g.name.ends_with("b3.conv1"),
                "{}",
                g.name
            );
        }
        let net = apply_structure(&t, &t.minimal()).unwrap();
        let concat = net.layers.iter().find(|l| l.name == "a3.concat").unwrap();
        assert_eq!(concat.c_out, 256);
    }

    #[test]
    fn googlenet_totals_close_to_reported() {
        let t = build_template("googlenet-cifar").unwrap();
        let net = apply_structure(&t, &t.baseline()).unwrap();
        let p = count_params(&net) as f64 / 6.17e6;
        let f = count_flops(&net) as f64 / 1533.96e6;
        assert!((p - 1.0).abs() < 0.05, "params ratio {p}");
        assert!((f - 1.0).abs() < 0.05, "flops ratio {f}");
    }

    #[test]
    fn cifar100_heads() {
        let t = build_template("vgg19-cifar100").unwrap();
        let net = apply_structure(&t, &t.baseline()).unwrap();
        let p = count_params(&net) as f64 / 20.09e6;
        let f = count_flops(&net) as f64 / 399.52e6;
        assert!((p - 1.0).abs() < 0.03 && (f - 1.0).abs() < 0.03, "{p} {f}");
        let t = build_template("resnet110-cifar").unwrap();
        let net = apply_structure(&t, &t.baseline()).unwrap();
        let p = count_params(&net) as f64 / 1.73e6;
        let f = count_flops(&net) as f64 / 256.04e6;
        assert!((p - 1.0).abs() < 0.03 && (f - 1.0).abs() < 0.03, "{p} {f}");
    }

    #[test]
    fn toy_ids() {
        assert_eq!(build_template("toynet-2").unwrap().num_free(), 2);
        let t = build_template("toynet-6w12").unwrap();
        assert_eq!(t.original_counts(), vec![12; 6]);
        assert_eq!(build_template("toynet-2c2").unwrap().num_classes, 2);
        assert_eq!(build_template("toynet-0").unwrap().num_free(), 0);
        for bad in [
            "toynet-",
            "toynet-2w16",
            "toynet-2x",
            "vgg16",
            "resnet20-cifar",
            "alexnet-cifar",
        ] {
            assert!(
                matches!(build_template(bad), Err(StructError::UnknownArchitecture(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn every_conv_width_is_owned() {
        for id in ["vgg16-cifar", "resnet56-cifar", "googlenet-cifar", "toynet-3"] {
            let t = build_template(id).unwrap();
            for (i, l) in t.layers.iter().enumerate() {
                if matches!(l.kind, LayerKind::Conv | LayerKind::Dense) {
                    let owners = t
                        .groups
                        .iter()
                        .filter(|g| {
                            g.member_edges
                                .iter()
                                .any(|e| e.layer == i && e.role == EdgeRole::Produces)
                        })
                        .count();
                    assert_eq!(owners, 1, "{id} {}", l.name);
                }
            }
        }
    }
}
