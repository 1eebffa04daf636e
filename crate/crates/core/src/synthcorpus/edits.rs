use super::{Edit, EditScript, Object, Scene, Selector};
use crate::error::{Error, Result};

fn resolve(objects: &[Object], selector: &Selector) -> Result<usize> {
    let mut hits = objects
        .iter()
        .enumerate()
        .filter(|(_, o)| selector.matches(o))
        .map(|(i, _)| i);
    match (hits.next(), hits.next()) {
        (Some(i), None) => Ok(i),
        (first, _) => Err(Error::UnresolvableSelector {
            selector: selector.to_string(),
            matches: if first.is_none() {
                0
            } else {
                2 + hits.count()
            },
        }),
    }
}

/// Applies `edits` in order. Each selector is resolved against the scene as it
/// stands when its edit runs; the result is returned in canonical order.
pub fn apply_edits(reference: &Scene, edits: &EditScript) -> Result<Scene> {
    let mut objects = reference.objects().to_vec();
    let mut background = reference.background();
    for edit in edits.edits() {
        match *edit {
            Edit::Add { object } => {
                if objects.len() >= super::MAX_OBJECTS {
                    return Err(Error::CapacityExceeded(objects.len() + 1));
                }
                objects.push(object);
            }
            Edit::Remove { selector } => {
                let i = resolve(&objects, &selector)?;
                objects.remove(i);
                if objects.is_empty() {
                    return Err(Error::InvalidScene("REMOVE would leave an empty scene".into()));
                }
            }
            Edit::Replace { selector, object } => {
                let i = resolve(&objects, &selector)?;
                objects[i] = object;
            }
            Edit::Modify {
                selector,
                attribute,
                value,
            } => {
                let i = resolve(&objects, &selector)?;
                objects[i] = objects[i].with(attribute, value);
            }
            Edit::ChangeBackground { background: b } => background = b,
        }
        objects.sort();
    }
    Scene::new(objects, background)
}
